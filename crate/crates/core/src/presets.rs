//! Shipped per-band thresholds for Mixtral-8x7B and DeepSeek-MoE-16B-Chat.
//!
//! Each preset carries `t_fix` and `eps_high` for the early, middle and final layer
//! bands. Where the band boundaries lie is not part of a preset; by default they are
//! the thirds of the layer count (see [`LayerBands::thirds`]).

use crate::error::{Error, Result};
use crate::routing::{BandParams, LaserParams, LayerBands, TrimMode};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub name: &'static str,
    pub k: usize,
    pub num_experts: usize,
    pub num_layers: usize,
}

pub const MIXTRAL_8X7B: ModelShape = ModelShape {
    name: "Mixtral-8x7B",
    k: 2,
    num_experts: 8,
    num_layers: 32,
};

/// Routed experts only; the shared experts take no part in routing.
pub const DEEPSEEK_MOE_16B: ModelShape = ModelShape {
    name: "DeepSeek-MoE-16B-Chat",
    k: 6,
    num_experts: 64,
    num_layers: 28,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub model: ModelShape,
    pub dataset: &'static str,
    /// Early / middle / final.
    pub t_fix: [f64; 3],
    /// Early / middle / final.
    pub eps_high: [f64; 3],
}

const MIXTRAL_ARC_EPS: [f64; 3] = [0.7159, 0.6419, 0.6285];

pub const PRESETS: [Preset; 8] = [
    Preset {
        name: "deepseek-arc-challenge",
        model: DEEPSEEK_MOE_16B,
        dataset: "ARC-Challenge",
        t_fix: [0.80, 0.80, 0.80],
        eps_high: [0.40, 0.40, 0.40],
    },
    Preset {
        name: "deepseek-arc-easy",
        model: DEEPSEEK_MOE_16B,
        dataset: "ARC-Easy",
        t_fix: [0.80, 0.80, 0.80],
        eps_high: [0.35, 0.35, 0.35],
    },
    Preset {
        name: "mixtral-arc-challenge",
        model: MIXTRAL_8X7B,
        dataset: "ARC-Challenge",
        t_fix: [0.60, 0.60, 0.60],
        eps_high: MIXTRAL_ARC_EPS,
    },
    Preset {
        name: "mixtral-arc-easy",
        model: MIXTRAL_8X7B,
        dataset: "ARC-Easy",
        t_fix: [0.60, 0.60, 0.60],
        eps_high: MIXTRAL_ARC_EPS,
    },
    Preset {
        name: "deepseek-gsm8k",
        model: DEEPSEEK_MOE_16B,
        dataset: "GSM8K",
        t_fix: [0.25, 0.45, 0.55],
        eps_high: [0.30, 0.30, 0.30],
    },
    Preset {
        name: "deepseek-mmlu",
        model: DEEPSEEK_MOE_16B,
        dataset: "MMLU",
        t_fix: [0.80, 0.80, 0.80],
        eps_high: [0.40, 0.40, 0.40],
    },
    Preset {
        name: "mixtral-gsm8k",
        model: MIXTRAL_8X7B,
        dataset: "GSM8K",
        t_fix: [0.60, 0.60, 0.60],
        eps_high: [0.72, 0.75, 0.80],
    },
    Preset {
        name: "mixtral-mmlu",
        model: MIXTRAL_8X7B,
        dataset: "MMLU",
        t_fix: [0.40, 0.40, 0.40],
        eps_high: MIXTRAL_ARC_EPS,
    },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.name)
}

impl Preset {
    /// Band parameters over `bands`, which must have one to three bands. Three bands
    /// take early/middle/final values, two take early/final, one takes middle.
    pub fn band_params<T: Scalar>(
        &self,
        bands: &LayerBands,
        c: usize,
        trim_mode: TrimMode,
        rng_seed: u64,
    ) -> Result<BandParams<T>> {
        let slots: &[usize] = match bands.len() {
            1 => &[1],
            2 => &[0, 2],
            3 => &[0, 1, 2],
            n => {
                return Err(Error::config(format!(
                    "preset {} has three bands but {n} were given",
                    self.name
                )))
            }
        };
        let params = slots
            .iter()
            .map(|&i| {
                LaserParams::new(
                    self.model.k,
                    self.eps_high[i],
                    self.t_fix[i],
                    c,
                    trim_mode,
                    rng_seed,
                )
            })
            .collect();
        BandParams::from_bands(bands, params)
    }
}
