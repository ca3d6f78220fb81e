//! Token-to-expert routing policies and the per-layer load tracker they share.
//!
//! Three policies are provided:
//!
//! * [`route_vanilla_topk`]: the `k` highest-scoring experts, loads ignored.
//! * [`route_load_only`]: the `k` least-loaded experts, scores ignored.
//! * [`route_laser`]: top-k when the top-k mass dominates, otherwise the least-loaded
//!   experts of a score-thresholded candidate pool.
//!
//! All policies are pure; [`LoadVector`] is the only mutable state. Within one
//! (batch, layer) context tokens must be routed sequentially against the evolving loads.

mod laser;
mod params;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use laser::{context_rng, route_laser, LaserRouter, RNG_ALGORITHM};
pub use params::{resolve_band, Band, BandParams, LaserParams, LayerBands, TrimMode};

use crate::error::{Error, Result};
use crate::gate::{check_k, GateScores};
use crate::scalar::Scalar;

/// Per-expert running token counts within one routing context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoadVector(Vec<u64>);

impl LoadVector {
    pub fn zeros(num_experts: usize) -> Self {
        Self(vec![0; num_experts])
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self(counts)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, expert: usize) -> u64 {
        self.0[expert]
    }

    #[inline]
    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn reset(&mut self) {
        self.0.iter_mut().for_each(|l| *l = 0);
    }

    /// Increments the load of every selected expert by one.
    pub fn apply(&mut self, decision: &RoutingDecision) {
        for &e in &decision.selected {
            self.0[e] += 1;
        }
    }
}

/// Which branch of the routing rule produced a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoutePath {
    /// Plain top-k selection (dominance branch, vanilla, or `k = n`).
    SkewedTopK,
    /// Least-loaded selection from an expanded candidate pool (also used by load-only).
    Expanded,
}

impl RoutePath {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutePath::SkewedTopK => "topk",
            RoutePath::Expanded => "expanded",
        }
    }
}

impl fmt::Display for RoutePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of routing one token in one layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// `k` distinct expert indices in selection order.
    pub selected: Vec<usize>,
    pub path: RoutePath,
    /// Candidate pool size `m` (equals `k` on the top-k branch).
    pub pool_size: usize,
    /// Working set size `c* = min(c, m)` (equals `k` on the top-k branch).
    pub working_set_size: usize,
}

impl RoutingDecision {
    pub(crate) fn top_k(selected: Vec<usize>) -> Self {
        let k = selected.len();
        Self {
            selected,
            path: RoutePath::SkewedTopK,
            pool_size: k,
            working_set_size: k,
        }
    }

    /// Selected experts sorted ascending, for set comparisons.
    pub fn selected_set(&self) -> Vec<usize> {
        let mut s = self.selected.clone();
        s.sort_unstable();
        s
    }

    /// `selected` joined with `;` as written to decision logs.
    pub fn selected_joined(&self) -> String {
        let parts: Vec<String> = self.selected.iter().map(|e| e.to_string()).collect();
        parts.join(";")
    }
}

/// The `k` highest-scoring experts; ties go to the lower index.
pub fn route_vanilla_topk<T: Scalar>(scores: &GateScores<T>, k: usize) -> Result<RoutingDecision> {
    Ok(RoutingDecision::top_k(scores.top_k(k)?))
}

/// The `k` least-loaded experts; ties go to the lower index.
pub fn route_load_only(loads: &LoadVector, k: usize) -> Result<RoutingDecision> {
    let n = loads.len();
    check_k(k, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&e| (loads.get(e), e));
    order.truncate(k);
    Ok(RoutingDecision {
        selected: order,
        path: RoutePath::Expanded,
        pool_size: n,
        working_set_size: n,
    })
}

/// Returns a copy of `loads` with every selected expert incremented.
pub fn update_loads(loads: &LoadVector, decision: &RoutingDecision) -> Result<LoadVector> {
    if let Some(&bad) = decision.selected.iter().find(|&&e| e >= loads.len()) {
        return Err(Error::input(format!(
            "decision selects expert {bad} but only {} experts exist",
            loads.len()
        )));
    }
    let mut next = loads.clone();
    next.apply(decision);
    Ok(next)
}
