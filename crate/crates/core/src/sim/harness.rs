//! Experiment driver: routes a workload batch by batch and layer by layer, then
//! turns the resulting assignment counts into imbalance reports and summaries.
//!
//! Each layer owns its [`LoadVector`] and is processed by one worker; within a layer,
//! batches are visited in ascending order and tokens in token order. Results are
//! merged back in (batch, layer, token) order, so output does not depend on the
//! number of worker threads.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{context_stream, SyntheticSpec};
use super::trace::Trace;
use crate::error::{Error, Result};
use crate::gate::{GateScores, LayerStats, LayerStatsAccumulator, RegimeThresholds};
use crate::metrics::{
    summarize_batches, AssignmentCounts, BatchSummary, ImbalanceReport, LayerWeights,
    PlacementMatrix,
};
use crate::perf::PerfParams;
use crate::routing::{
    context_rng, route_laser, route_load_only, route_vanilla_topk, BandParams, LoadVector,
    RoutingDecision,
};

/// Where the token stream comes from.
#[derive(Debug, Clone)]
pub enum Workload {
    Synthetic(SyntheticSpec),
    Trace(Trace),
}

impl Workload {
    pub fn num_layers(&self) -> usize {
        match self {
            Workload::Synthetic(s) => s.num_layers,
            Workload::Trace(t) => t.num_layers(),
        }
    }

    pub fn num_experts(&self) -> usize {
        match self {
            Workload::Synthetic(s) => s.num_experts,
            Workload::Trace(t) => t.num_experts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Vanilla,
    LoadOnly,
    Laser(BandParams<f64>),
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Vanilla => "vanilla",
            Policy::LoadOnly => "load-only",
            Policy::Laser(_) => "laser",
        }
    }
}

/// When per-expert loads start over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadReset {
    /// Fresh loads for every (batch, layer).
    #[default]
    #[serde(alias = "per-batch")]
    Batch,
    /// Loads carry over from one batch to the next within a layer.
    Cumulative,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    Uniform,
    /// Per-layer FLOPs, normalized into weights.
    Flops(Vec<f64>),
}

impl WeightScheme {
    pub fn weights(&self, num_layers: usize) -> Result<LayerWeights<f64>> {
        match self {
            WeightScheme::Uniform => LayerWeights::uniform(num_layers),
            WeightScheme::Flops(f) => {
                if f.len() != num_layers {
                    return Err(Error::config(format!(
                        "{} per-layer FLOP values for {num_layers} layers",
                        f.len()
                    )));
                }
                LayerWeights::from_flops(f)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub workload: Workload,
    /// Experts selected per token.
    pub k: usize,
    pub policy: Policy,
    /// Candidate-pool caps to replay the workload with (LASER policy only).
    pub sweep: Option<Vec<usize>>,
    pub weights: WeightScheme,
    pub placement: Option<PlacementMatrix<f64>>,
    pub perf: Option<PerfParams<f64>>,
    pub load_reset: LoadReset,
    pub regimes: RegimeThresholds<f64>,
    /// Also run vanilla and load-only on the same workload.
    pub baselines: bool,
    /// Retain the per-token decision log of the primary run.
    pub keep_decisions: bool,
}

impl ExperimentConfig {
    pub fn new(workload: Workload, k: usize, policy: Policy) -> Self {
        Self {
            workload,
            k,
            policy,
            sweep: None,
            weights: WeightScheme::Uniform,
            placement: None,
            perf: None,
            load_reset: LoadReset::Batch,
            regimes: RegimeThresholds::default(),
            baselines: false,
            keep_decisions: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.workload.num_experts();
        let layers = self.workload.num_layers();
        if let Workload::Synthetic(spec) = &self.workload {
            spec.validate()?;
        }
        if self.k == 0 || self.k > n {
            return Err(Error::config(format!(
                "k = {} must lie in [1, {n}]",
                self.k
            )));
        }
        if let Policy::Laser(bands) = &self.policy {
            if bands.num_layers() != layers {
                return Err(Error::config(format!(
                    "bands cover {} layers but the workload has {layers}",
                    bands.num_layers()
                )));
            }
            bands.validate(n)?;
            if let Some(b) = bands.bands().iter().find(|b| b.params.k != self.k) {
                return Err(Error::config(format!(
                    "band [{}..{}] uses k = {} but the experiment uses k = {}",
                    b.first, b.last, b.params.k, self.k
                )));
            }
        }
        if let Some(sweep) = &self.sweep {
            if !matches!(self.policy, Policy::Laser(_)) {
                return Err(Error::config("a c sweep requires the laser policy"));
            }
            if let Some(&c) = sweep.iter().find(|&&c| c < self.k || c > n) {
                return Err(Error::config(format!(
                    "sweep value c = {c} must lie in [k, n] = [{}, {n}]",
                    self.k
                )));
            }
        }
        self.weights.weights(layers)?;
        if let Some(a) = &self.placement {
            if a.num_experts() != n {
                return Err(Error::config(format!(
                    "placement covers {} experts but the workload has {n}",
                    a.num_experts()
                )));
            }
        }
        if let Some(p) = &self.perf {
            p.validate()?;
        }
        self.regimes
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }
}

/// One routed token in the decision log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionRow {
    pub batch: u32,
    pub layer: u16,
    pub token: u32,
    pub decision: RoutingDecision,
}

impl DecisionRow {
    pub const CSV_HEADER: &'static str = "batch,layer,token,path,m,c_star,selected";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.batch,
            self.layer,
            self.token,
            self.decision.path,
            self.decision.pool_size,
            self.decision.working_set_size,
            self.decision.selected_joined()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub batch: u32,
    pub counts: AssignmentCounts,
    pub report: ImbalanceReport<f64>,
}

/// Everything one policy produced on one workload.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRun {
    pub policy: &'static str,
    /// The uniform candidate-pool cap for sweep points.
    pub c: Option<usize>,
    pub decisions: Vec<DecisionRow>,
    pub batches: Vec<BatchResult>,
    /// `None` if no batch routed any token.
    pub summary: Option<BatchSummary<f64>>,
    pub gpu_summary: Option<BatchSummary<f64>>,
    /// Counts summed over all batches, `[num_layers x num_experts]`.
    pub heatmap: AssignmentCounts,
}

impl PolicyRun {
    /// Per-batch `I_agg` samples in batch order.
    pub fn i_agg_samples(&self) -> Vec<f64> {
        self.batches.iter().filter_map(|b| b.report.i_agg).collect()
    }

    pub fn skipped_layers(&self) -> usize {
        self.batches.iter().map(|b| b.report.skipped_layers).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub primary: PolicyRun,
    /// Vanilla and load-only runs when requested (the primary policy excluded).
    pub baselines: Vec<PolicyRun>,
    pub sweep: Vec<PolicyRun>,
    pub layer_stats: Vec<LayerStats<f64>>,
    pub num_layers: usize,
    pub num_experts: usize,
}

impl ExperimentOutput {
    pub fn run(&self, policy: &str) -> Option<&PolicyRun> {
        std::iter::once(&self.primary)
            .chain(&self.baselines)
            .find(|r| r.policy == policy)
    }
}

/// Routes the configured workload with the configured policy, plus any baselines and
/// sweep points. Sweep points and baselines replay the identical token stream.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let prepared = Prepared::new(&cfg.workload);
    let weights = cfg.weights.weights(prepared.num_layers)?;

    let (primary, layer_stats) = run_policy(
        &prepared,
        cfg,
        &cfg.policy,
        &weights,
        cfg.keep_decisions,
        true,
    )?;
    let primary_run = primary.with_c(uniform_c(&cfg.policy));

    let mut baselines = Vec::new();
    if cfg.baselines {
        for policy in [Policy::Vanilla, Policy::LoadOnly] {
            if policy.name() != cfg.policy.name() {
                baselines.push(run_policy(&prepared, cfg, &policy, &weights, false, false)?.0);
            }
        }
    }

    let mut sweep = Vec::new();
    if let (Some(values), Policy::Laser(bands)) = (&cfg.sweep, &cfg.policy) {
        for &c in values {
            let mut bands = bands.clone();
            bands.bands_mut().for_each(|p| p.c = c);
            let run = run_policy(
                &prepared,
                cfg,
                &Policy::Laser(bands),
                &weights,
                false,
                false,
            )?
            .0;
            sweep.push(run.with_c(Some(c)));
        }
    }

    Ok(ExperimentOutput {
        primary: primary_run,
        baselines,
        sweep,
        layer_stats: layer_stats.unwrap_or_default(),
        num_layers: prepared.num_layers,
        num_experts: prepared.num_experts,
    })
}

fn uniform_c(policy: &Policy) -> Option<usize> {
    match policy {
        Policy::Laser(bands) => {
            let first = bands.bands().first()?.params.c;
            bands
                .bands()
                .iter()
                .all(|b| b.params.c == first)
                .then_some(first)
        }
        _ => None,
    }
}

impl PolicyRun {
    fn with_c(mut self, c: Option<usize>) -> Self {
        self.c = c;
        self
    }
}

/// Token access for a workload: synthetic contexts are regenerated on demand, trace
/// records are indexed by (batch, layer) and sorted by token.
struct Prepared<'a> {
    num_layers: usize,
    num_experts: usize,
    batches: Vec<u32>,
    source: Source<'a>,
}

enum Source<'a> {
    Synthetic(&'a SyntheticSpec),
    Trace {
        trace: &'a Trace,
        index: BTreeMap<(u32, u16), Vec<usize>>,
    },
}

impl<'a> Prepared<'a> {
    fn new(workload: &'a Workload) -> Self {
        match workload {
            Workload::Synthetic(spec) => Self {
                num_layers: spec.num_layers,
                num_experts: spec.num_experts,
                batches: (0..spec.num_batches as u32).collect(),
                source: Source::Synthetic(spec),
            },
            Workload::Trace(trace) => {
                let mut index: BTreeMap<(u32, u16), Vec<usize>> = BTreeMap::new();
                for (i, r) in trace.records.iter().enumerate() {
                    index.entry((r.batch, r.layer)).or_default().push(i);
                }
                for ids in index.values_mut() {
                    ids.sort_by_key(|&i| trace.records[i].token);
                }
                let mut batches: Vec<u32> = index.keys().map(|&(b, _)| b).collect();
                batches.dedup();
                Self {
                    num_layers: trace.num_layers(),
                    num_experts: trace.num_experts(),
                    batches,
                    source: Source::Trace { trace, index },
                }
            }
        }
    }

    /// `(token id, scores)` of one context in token order.
    fn tokens(&self, batch: u32, layer: usize) -> Result<Vec<(u32, GateScoresRef<'a>)>> {
        match &self.source {
            Source::Synthetic(spec) => Ok(spec
                .context(batch as usize, layer)?
                .into_iter()
                .enumerate()
                .map(|(t, s)| (t as u32, GateScoresRef::Owned(s)))
                .collect()),
            Source::Trace { trace, index } => Ok(index
                .get(&(batch, layer as u16))
                .map(|ids| {
                    ids.iter()
                        .map(|&i| {
                            let r = &trace.records[i];
                            (r.token, GateScoresRef::Borrowed(&r.scores))
                        })
                        .collect()
                })
                .unwrap_or_default()),
        }
    }
}

enum GateScoresRef<'a> {
    Owned(GateScores<f64>),
    Borrowed(&'a GateScores<f64>),
}

impl std::ops::Deref for GateScoresRef<'_> {
    type Target = GateScores<f64>;

    fn deref(&self) -> &GateScores<f64> {
        match self {
            GateScoresRef::Owned(s) => s,
            GateScoresRef::Borrowed(s) => s,
        }
    }
}

struct LayerOutcome {
    /// One count row per batch (in `Prepared::batches` order).
    rows: Vec<Vec<u64>>,
    decisions: Vec<Vec<DecisionRow>>,
    stats: Option<LayerStatsAccumulator<f64>>,
}

fn route_layer(
    prepared: &Prepared<'_>,
    cfg: &ExperimentConfig,
    policy: &Policy,
    layer: usize,
    keep_decisions: bool,
    collect_stats: bool,
) -> Result<LayerOutcome> {
    let n = prepared.num_experts;
    let k = cfg.k;
    let laser_params = match policy {
        Policy::Laser(bands) => Some(bands.resolve(layer)?.clone()),
        _ => None,
    };
    let mut stats = if collect_stats {
        Some(LayerStatsAccumulator::new(k, cfg.regimes)?)
    } else {
        None
    };
    let mut loads = LoadVector::zeros(n);
    let mut rows = Vec::with_capacity(prepared.batches.len());
    let mut decisions = Vec::with_capacity(prepared.batches.len());

    for &batch in &prepared.batches {
        if cfg.load_reset == LoadReset::Batch {
            loads.reset();
        }
        let mut row = vec![0u64; n];
        let mut log = Vec::new();
        let tokens = prepared.tokens(batch, layer)?;
        let mut rng = laser_params
            .as_ref()
            .map(|p| context_rng(p.rng_seed, context_stream(batch as usize, layer)));
        for (token, scores) in &tokens {
            if let Some(acc) = stats.as_mut() {
                acc.push(layer, scores)?;
            }
            let decision = match (policy, &laser_params, rng.as_mut()) {
                (Policy::Vanilla, _, _) => route_vanilla_topk(scores, k)?,
                (Policy::LoadOnly, _, _) => route_load_only(&loads, k)?,
                (Policy::Laser(_), Some(p), Some(rng)) => route_laser(scores, &loads, p, rng)?,
                _ => unreachable!("laser parameters resolved above"),
            };
            loads.apply(&decision);
            for &e in &decision.selected {
                row[e] += 1;
            }
            if keep_decisions {
                log.push(DecisionRow {
                    batch,
                    layer: layer as u16,
                    token: *token,
                    decision,
                });
            }
        }
        debug_assert_eq!(row.iter().sum::<u64>(), (k * tokens.len()) as u64);
        rows.push(row);
        decisions.push(log);
    }
    Ok(LayerOutcome {
        rows,
        decisions,
        stats,
    })
}

type RunWithStats = (PolicyRun, Option<Vec<LayerStats<f64>>>);

fn run_policy(
    prepared: &Prepared<'_>,
    cfg: &ExperimentConfig,
    policy: &Policy,
    weights: &LayerWeights<f64>,
    keep_decisions: bool,
    collect_stats: bool,
) -> Result<RunWithStats> {
    let layers: Vec<LayerOutcome> = (0..prepared.num_layers)
        .into_par_iter()
        .map(|layer| route_layer(prepared, cfg, policy, layer, keep_decisions, collect_stats))
        .collect::<Result<_>>()?;

    let n = prepared.num_experts;
    let mut heatmap = AssignmentCounts::zeros(prepared.num_layers, n);
    let mut batches = Vec::with_capacity(prepared.batches.len());
    let mut decisions = Vec::new();
    for (bi, &batch) in prepared.batches.iter().enumerate() {
        let mut counts = AssignmentCounts::zeros(prepared.num_layers, n);
        for (layer, outcome) in layers.iter().enumerate() {
            counts.row_mut(layer).copy_from_slice(&outcome.rows[bi]);
        }
        heatmap.accumulate(&counts)?;
        let report = ImbalanceReport::build(&counts, weights, cfg.placement.as_ref())?;
        batches.push(BatchResult {
            batch,
            counts,
            report,
        });
    }
    if keep_decisions {
        for bi in 0..prepared.batches.len() {
            for outcome in &layers {
                decisions.extend(outcome.decisions[bi].iter().cloned());
            }
        }
    }

    let samples: Vec<f64> = batches.iter().filter_map(|b| b.report.i_agg).collect();
    let gpu_samples: Vec<f64> = batches.iter().filter_map(|b| b.report.gpu_i_agg).collect();
    let summary = (!samples.is_empty())
        .then(|| summarize_batches(&samples))
        .transpose()?;
    let gpu_summary = (!gpu_samples.is_empty())
        .then(|| summarize_batches(&gpu_samples))
        .transpose()?;

    let stats = if collect_stats {
        let mut merged: Option<LayerStatsAccumulator<f64>> = None;
        for outcome in layers {
            if let Some(acc) = outcome.stats {
                match merged.as_mut() {
                    Some(m) => m.merge(acc)?,
                    None => merged = Some(acc),
                }
            }
        }
        Some(merged.map(|m| m.finish()).unwrap_or_default())
    } else {
        None
    };

    Ok((
        PolicyRun {
            policy: policy.name(),
            c: None,
            decisions,
            batches,
            summary,
            gpu_summary,
            heatmap,
        },
        stats,
    ))
}
