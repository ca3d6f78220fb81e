//! Artifact emission. Column layouts:
//!
//! | file               | columns                                                   |
//! |--------------------|-----------------------------------------------------------|
//! | `decisions.csv`    | batch, layer, token, path, m, c_star, selected (`;`-joined) |
//! | `counts_{batch}.csv` | layer, e0 .. e{n-1}                                     |
//! | `imbalance.csv`    | batch, layer, I, MV, gpu_I, gpu_MV (empty when undefined) |
//! | `heatmap.csv`      | layer, e0 .. e{n-1} (counts summed over batches)          |
//! | `layerstats.csv`   | layer, mean_Mk, entropy_p25/p50/p75, frac_*, tokens       |
//! | `summary.json`     | see [`Summary`]                                           |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::harness::{DecisionRow, ExperimentConfig, ExperimentOutput, LoadReset, PolicyRun};
use crate::error::{Error, Result};
use crate::gate::LayerStats;
use crate::metrics::{AssignmentCounts, BatchSummary, Imbalance};
use crate::perf::{estimate, PerfEstimate, PerfParams};
use crate::routing::RNG_ALGORITHM;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rng: &'static str,
    pub k: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub load_reset: LoadReset,
    pub policies: Vec<PolicySummary>,
    /// One entry per swept `c`, in the order requested.
    pub sweep: Vec<PolicySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy: &'static str,
    pub c: Option<usize>,
    pub i_agg: Option<BatchSummary<f64>>,
    pub gpu_i_agg: Option<BatchSummary<f64>>,
    pub skipped_layers: usize,
    pub perf: Option<PerfEstimate<f64>>,
}

/// Mean imbalance fed to the performance model: GPU level when a placement is set.
fn perf_imbalance(run: &PolicyRun) -> Option<f64> {
    run.gpu_summary.or(run.summary).map(|s| s.mean)
}

fn policy_summary(
    run: &PolicyRun,
    perf: Option<&PerfParams<f64>>,
    base: Option<f64>,
) -> Result<PolicySummary> {
    let perf = match (perf, perf_imbalance(run)) {
        (Some(p), Some(i)) => Some(estimate(i, base.unwrap_or(i), p)?),
        _ => None,
    };
    Ok(PolicySummary {
        policy: run.policy,
        c: run.c,
        i_agg: run.summary,
        gpu_i_agg: run.gpu_summary,
        skipped_layers: run.skipped_layers(),
        perf,
    })
}

/// Builds the JSON summary. Performance estimates use the vanilla run as baseline
/// when one exists, otherwise each policy is its own baseline.
pub fn summarize(cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<Summary> {
    let base = out.run("vanilla").and_then(perf_imbalance);
    let perf = cfg.perf.as_ref();
    let policies = std::iter::once(&out.primary)
        .chain(&out.baselines)
        .map(|r| policy_summary(r, perf, base))
        .collect::<Result<_>>()?;
    let sweep = out
        .sweep
        .iter()
        .map(|r| policy_summary(r, perf, base))
        .collect::<Result<_>>()?;
    Ok(Summary {
        rng: RNG_ALGORITHM,
        k: cfg.k,
        num_layers: out.num_layers,
        num_experts: out.num_experts,
        load_reset: cfg.load_reset,
        policies,
        sweep,
    })
}

pub fn summary_json(summary: &Summary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary is serializable");
    s.push('\n');
    s
}

pub fn decisions_csv(rows: &[DecisionRow]) -> String {
    let mut s = String::with_capacity(rows.len() * 24 + 64);
    s.push_str(DecisionRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn counts_csv(counts: &AssignmentCounts) -> String {
    let mut s = String::from("layer");
    for e in 0..counts.num_experts() {
        let _ = write!(s, ",e{e}");
    }
    s.push('\n');
    for (layer, row) in counts.rows().enumerate() {
        let _ = write!(s, "{layer}");
        for c in row {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

fn push_imbalance(s: &mut String, imb: Option<&Imbalance<f64>>) {
    match imb {
        Some(i) => {
            let _ = write!(s, ",{},{}", i.factor, i.max_violation);
        }
        None => s.push_str(",,"),
    }
}

pub fn imbalance_csv(run: &PolicyRun) -> String {
    let mut s = String::from("batch,layer,I,MV,gpu_I,gpu_MV\n");
    for b in &run.batches {
        for (layer, imb) in b.report.per_layer.iter().enumerate() {
            let _ = write!(s, "{},{layer}", b.batch);
            push_imbalance(&mut s, imb.as_ref());
            let gpu = b
                .report
                .gpu_per_layer
                .as_ref()
                .and_then(|g| g[layer].as_ref());
            push_imbalance(&mut s, gpu);
            s.push('\n');
        }
    }
    s
}

pub fn layerstats_csv(stats: &[LayerStats<f64>]) -> String {
    let mut s = String::from(LayerStats::<f64>::CSV_HEADER);
    s.push('\n');
    for st in stats {
        s.push_str(&st.csv_row());
        s.push('\n');
    }
    s
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Writes every artifact of an experiment into `dir`, creating it if needed.
pub fn write_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &ExperimentOutput,
) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = summarize(cfg, out)?;
    if cfg.keep_decisions {
        write_file(dir, "decisions.csv", &decisions_csv(&out.primary.decisions))?;
    }
    for b in &out.primary.batches {
        write_file(
            dir,
            &format!("counts_{}.csv", b.batch),
            &counts_csv(&b.counts),
        )?;
    }
    write_file(dir, "imbalance.csv", &imbalance_csv(&out.primary))?;
    write_file(dir, "heatmap.csv", &counts_csv(&out.primary.heatmap))?;
    for run in &out.baselines {
        write_file(
            dir,
            &format!("heatmap_{}.csv", run.policy),
            &counts_csv(&run.heatmap),
        )?;
    }
    for run in &out.sweep {
        if let Some(c) = run.c {
            write_file(dir, &format!("heatmap_c{c}.csv"), &counts_csv(&run.heatmap))?;
        }
    }
    write_file(dir, "layerstats.csv", &layerstats_csv(&out.layer_stats))?;
    write_file(dir, "summary.json", &summary_json(&summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{RoutePath, RoutingDecision};

    #[test]
    fn decision_rows() {
        let row = DecisionRow {
            batch: 3,
            layer: 1,
            token: 7,
            decision: RoutingDecision {
                selected: vec![5, 0],
                path: RoutePath::Expanded,
                pool_size: 4,
                working_set_size: 3,
            },
        };
        assert_eq!(
            decisions_csv(&[row]),
            "batch,layer,token,path,m,c_star,selected\n3,1,7,expanded,4,3,5;0\n"
        );
    }

    #[test]
    fn counts_layout() {
        let c = AssignmentCounts::from_rows(vec![vec![1, 2], vec![3, 0]]).unwrap();
        assert_eq!(counts_csv(&c), "layer,e0,e1\n0,1,2\n1,3,0\n");
    }
}
