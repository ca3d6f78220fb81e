//! Load- and score-aware routing for Mixture-of-Experts inference.
//!
//! The numeric core ([`gate`], [`routing`], [`metrics`], [`perf`]) is generic over the
//! scalar type (`f32` or `f64`). The simulation layer in [`sim`] works in `f64`; the
//! aliases below name the `f64` instantiations.
//!
//! ```
//! use laser_core::{route_laser, context_rng, LoadVector, Params, Scores, TrimMode};
//!
//! let scores = Scores::new(vec![0.4, 0.35, 0.15, 0.1]).unwrap();
//! let loads = LoadVector::from_counts(vec![10, 0, 0, 0]);
//! let params = Params::new(1, 0.9, 0.5, 3, TrimMode::Top, 0);
//! let d = route_laser(&scores, &loads, &params, &mut context_rng(0, 0)).unwrap();
//! assert_eq!(d.selected, vec![1]);
//! ```

pub mod config;
pub mod error;
pub mod gate;
pub mod metrics;
pub mod perf;
pub mod presets;
pub mod routing;
mod scalar;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use gate::{
    aggregate_layer_stats, classify_regime, entropy, normalized_entropy, suggest_parameters,
    top_k_mass, GateScores, LayerStats, LayerStatsAccumulator, RegimeLabel, RegimeThresholds,
};
pub use metrics::{
    aggregate_imbalance, gpu_imbalance, gpu_loads, layer_imbalance, summarize_batches,
    AssignmentCounts, BatchSummary, Imbalance, ImbalanceReport, LayerWeights, PlacementMatrix,
};
pub use perf::{cost_per_token, estimate, step_time, throughput_ratio, PerfEstimate, PerfParams};
pub use routing::{
    context_rng, resolve_band, route_laser, route_load_only, route_vanilla_topk, update_loads,
    Band, BandParams, LaserParams, LaserRouter, LayerBands, LoadVector, RoutePath, RoutingDecision,
    TrimMode,
};
pub use scalar::Scalar;

pub type Scores = GateScores<f64>;
pub type Params = LaserParams<f64>;
pub type Bands = BandParams<f64>;
pub type Report = ImbalanceReport<f64>;
pub type Summary = BatchSummary<f64>;
pub type Perf = PerfParams<f64>;
pub type Placement = PlacementMatrix<f64>;
pub type Weights = LayerWeights<f64>;
pub type Stats = LayerStats<f64>;
