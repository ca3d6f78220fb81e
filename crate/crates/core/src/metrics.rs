//! Expert- and GPU-level imbalance.
//!
//! For one batch and layer with per-expert token counts `N_e`:
//! `I = max_e N_e / mean_e N_e` and `MV = (max - mean) / mean = I - 1`.
//! Layers combine into `I_agg = sum_L w_L I_L`. A placement matrix `A` (GPUs x experts,
//! columns summing to one) maps expert loads to GPU loads `N_g = sum_e A[g][e] N_e`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::RoutingDecision;
use crate::scalar::{cmp_finite, Scalar};
use crate::stats::{mean, nearest_rank_sorted};

/// Tolerance on weight and placement-column sums.
pub const SUM_EPS: f64 = 1e-9;

/// Tokens per expert per layer for one batch, row-major `[num_layers x num_experts]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentCounts {
    num_layers: usize,
    num_experts: usize,
    counts: Vec<u64>,
}

impl AssignmentCounts {
    pub fn zeros(num_layers: usize, num_experts: usize) -> Self {
        Self {
            num_layers,
            num_experts,
            counts: vec![0; num_layers * num_experts],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let num_experts = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_experts) {
            return Err(Error::input("count rows have different lengths"));
        }
        Ok(Self {
            num_layers: rows.len(),
            num_experts,
            counts: rows.into_iter().flatten().collect(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn row(&self, layer: usize) -> &[u64] {
        &self.counts[layer * self.num_experts..(layer + 1) * self.num_experts]
    }

    pub fn row_mut(&mut self, layer: usize) -> &mut [u64] {
        &mut self.counts[layer * self.num_experts..(layer + 1) * self.num_experts]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts
            .chunks(self.num_experts.max(1))
            .take(self.num_layers)
    }

    pub fn record(&mut self, layer: usize, decision: &RoutingDecision) {
        let row = self.row_mut(layer);
        for &e in &decision.selected {
            row[e] += 1;
        }
    }

    /// Element-wise sum, e.g. to build a utilization heatmap across batches.
    pub fn accumulate(&mut self, other: &AssignmentCounts) -> Result<()> {
        if other.num_layers != self.num_layers || other.num_experts != self.num_experts {
            return Err(Error::input("count matrices have different shapes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn layer_total(&self, layer: usize) -> u64 {
        self.row(layer).iter().sum()
    }
}

/// Imbalance factor and max violation of one load row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Imbalance<T> {
    pub factor: T,
    pub max_violation: T,
}

/// `max / mean` of a non-negative row; `None` when the row is empty or all zero.
fn row_imbalance<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> Option<Imbalance<T>> {
    let mut len = 0usize;
    let mut total = T::zero();
    let mut max = T::zero();
    for v in values {
        len += 1;
        total = total + v;
        if v > max {
            max = v;
        }
    }
    if len == 0 || total <= T::zero() {
        return None;
    }
    let avg = total / T::from_usize(len).expect("len representable");
    Some(Imbalance {
        factor: max / avg,
        max_violation: (max - avg) / avg,
    })
}

/// Expert-level imbalance of one layer's counts; `None` marks a skipped (all-zero) layer.
pub fn layer_imbalance<T: Scalar>(counts: &[u64]) -> Option<Imbalance<T>> {
    row_imbalance(counts.iter().map(|&c| T::from_count(c)))
}

/// GPU-level imbalance of one layer's GPU loads.
pub fn gpu_imbalance<T: Scalar>(gpu_loads: &[T]) -> Option<Imbalance<T>> {
    row_imbalance(gpu_loads.iter().copied())
}

/// Non-negative layer weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T>(Vec<T>);

impl<T: Scalar> LayerWeights<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::config(
                "layer weights must be finite and non-negative",
            ));
        }
        let sum: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if (sum - 1.0).abs() > SUM_EPS {
            return Err(Error::config(format!("layer weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(num_layers: usize) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::config("uniform weights need at least one layer"));
        }
        let w = T::one() / T::from_usize(num_layers).expect("layers representable");
        Ok(Self(vec![w; num_layers]))
    }

    /// Weights proportional to per-layer FLOPs (or any non-negative cost).
    pub fn from_flops(flops: &[T]) -> Result<Self> {
        if flops.iter().any(|f| !f.is_finite() || *f < T::zero()) {
            return Err(Error::config(
                "per-layer FLOPs must be finite and non-negative",
            ));
        }
        let total: T = flops.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::config("per-layer FLOPs sum to zero"));
        }
        Ok(Self(flops.iter().map(|&f| f / total).collect()))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `sum_L w_L I_L`.
pub fn aggregate_imbalance<T: Scalar>(per_layer: &[T], weights: &LayerWeights<T>) -> Result<T> {
    if per_layer.len() != weights.len() {
        return Err(Error::input(format!(
            "{} per-layer values but {} weights",
            per_layer.len(),
            weights.len()
        )));
    }
    Ok(per_layer
        .iter()
        .zip(weights.as_slice())
        .map(|(&i, &w)| w * i)
        .sum())
}

/// Weighted aggregate over the layers that have a value; the weights of skipped layers
/// are dropped and the rest renormalized. `None` when every layer is skipped.
fn aggregate_present<T: Scalar>(
    per_layer: &[Option<Imbalance<T>>],
    weights: &LayerWeights<T>,
) -> Option<T> {
    let mut num = T::zero();
    let mut den = T::zero();
    for (imb, &w) in per_layer.iter().zip(weights.as_slice()) {
        if let Some(imb) = imb {
            num = num + w * imb.factor;
            den = den + w;
        }
    }
    (den > T::zero()).then(|| num / den)
}

/// Expert-to-GPU placement, `[num_gpus x num_experts]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementMatrix<T> {
    num_gpus: usize,
    num_experts: usize,
    entries: Vec<T>,
}

impl<T: Scalar> PlacementMatrix<T> {
    /// Validates non-negativity and unit column sums.
    pub fn new(rows: Vec<Vec<T>>) -> Result<Self> {
        let num_gpus = rows.len();
        let num_experts = rows.first().map_or(0, Vec::len);
        if num_gpus == 0 || num_experts == 0 {
            return Err(Error::config("placement matrix must be non-empty"));
        }
        if rows.iter().any(|r| r.len() != num_experts) {
            return Err(Error::config("placement rows have different lengths"));
        }
        let entries: Vec<T> = rows.into_iter().flatten().collect();
        if entries.iter().any(|a| !a.is_finite() || *a < T::zero()) {
            return Err(Error::config(
                "placement entries must be finite and non-negative",
            ));
        }
        for e in 0..num_experts {
            let col: f64 = (0..num_gpus)
                .map(|g| entries[g * num_experts + e].as_f64())
                .sum();
            if (col - 1.0).abs() > SUM_EPS {
                return Err(Error::config(format!(
                    "placement column for expert {e} sums to {col}, not 1"
                )));
            }
        }
        Ok(Self {
            num_gpus,
            num_experts,
            entries,
        })
    }

    /// One expert per GPU.
    pub fn identity(num_experts: usize) -> Self {
        let rows = (0..num_experts)
            .map(|g| {
                (0..num_experts)
                    .map(|e| if e == g { T::one() } else { T::zero() })
                    .collect()
            })
            .collect();
        Self::new(rows).expect("identity is a valid placement")
    }

    /// Pure placement: expert `e` lives entirely on GPU `gpu_of[e]`.
    pub fn from_assignment(gpu_of: &[usize], num_gpus: usize) -> Result<Self> {
        if let Some(&g) = gpu_of.iter().find(|&&g| g >= num_gpus) {
            return Err(Error::config(format!(
                "GPU index {g} out of range for {num_gpus} GPUs"
            )));
        }
        let rows = (0..num_gpus)
            .map(|g| {
                gpu_of
                    .iter()
                    .map(|&h| if h == g { T::one() } else { T::zero() })
                    .collect()
            })
            .collect();
        Self::new(rows)
    }

    pub fn num_gpus(&self) -> usize {
        self.num_gpus
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    #[inline]
    pub fn get(&self, gpu: usize, expert: usize) -> T {
        self.entries[gpu * self.num_experts + expert]
    }

    /// GPU loads of one layer.
    pub fn apply(&self, expert_counts: &[u64]) -> Result<Vec<T>> {
        if expert_counts.len() != self.num_experts {
            return Err(Error::input(format!(
                "{} expert counts for a placement over {} experts",
                expert_counts.len(),
                self.num_experts
            )));
        }
        Ok((0..self.num_gpus)
            .map(|g| {
                expert_counts
                    .iter()
                    .enumerate()
                    .map(|(e, &c)| self.get(g, e) * T::from_count(c))
                    .sum()
            })
            .collect())
    }
}

/// GPU loads for every layer, `[num_layers x num_gpus]`.
pub fn gpu_loads<T: Scalar>(
    counts: &AssignmentCounts,
    placement: &PlacementMatrix<T>,
) -> Result<Vec<Vec<T>>> {
    counts.rows().map(|row| placement.apply(row)).collect()
}

/// Imbalance of one batch across all layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport<T> {
    /// `None` for skipped (all-zero) layers.
    pub per_layer: Vec<Option<Imbalance<T>>>,
    /// `None` when every layer was skipped.
    pub i_agg: Option<T>,
    pub gpu_per_layer: Option<Vec<Option<Imbalance<T>>>>,
    pub gpu_i_agg: Option<T>,
    pub skipped_layers: usize,
}

impl<T: Scalar> ImbalanceReport<T> {
    pub fn build(
        counts: &AssignmentCounts,
        weights: &LayerWeights<T>,
        placement: Option<&PlacementMatrix<T>>,
    ) -> Result<Self> {
        if weights.len() != counts.num_layers() {
            return Err(Error::config(format!(
                "{} layer weights for {} layers",
                weights.len(),
                counts.num_layers()
            )));
        }
        let per_layer: Vec<Option<Imbalance<T>>> = counts.rows().map(layer_imbalance).collect();
        let skipped_layers = per_layer.iter().filter(|i| i.is_none()).count();
        let i_agg = aggregate_present(&per_layer, weights);
        let (gpu_per_layer, gpu_i_agg) = match placement {
            Some(a) => {
                let loads = gpu_loads(counts, a)?;
                let per: Vec<_> = loads.iter().map(|row| gpu_imbalance(row)).collect();
                let agg = aggregate_present(&per, weights);
                (Some(per), agg)
            }
            None => (None, None),
        };
        Ok(Self {
            per_layer,
            i_agg,
            gpu_per_layer,
            gpu_i_agg,
            skipped_layers,
        })
    }
}

/// Distribution of `I_agg` across batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary<T> {
    pub p50: T,
    pub p95: T,
    pub mean: T,
    pub batch_count: usize,
}

/// Nearest-rank P50/P95 and arithmetic mean of per-batch `I_agg` values.
pub fn summarize_batches<T: Scalar>(samples: &[T]) -> Result<BatchSummary<T>> {
    if samples.is_empty() {
        return Err(Error::input("cannot summarize an empty sample set"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| cmp_finite(*a, *b));
    Ok(BatchSummary {
        p50: nearest_rank_sorted(&sorted, 50.0).expect("nonempty"),
        p95: nearest_rank_sorted(&sorted, 95.0).expect("nonempty"),
        mean: mean(samples).expect("nonempty"),
        batch_count: samples.len(),
    })
}
