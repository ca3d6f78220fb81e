//! Analytical step-time, throughput and cost model driven by GPU-level imbalance.
//!
//! `T_step = gamma * I_agg_gpu + C` with `C = t_comm + t_offload`, both constants
//! per experiment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerfParams<T> {
    /// Seconds of critical-path compute per unit of imbalance.
    pub gamma: T,
    #[serde(default)]
    pub t_comm: T,
    #[serde(default)]
    pub t_offload: T,
    /// Currency per GPU-hour.
    #[serde(default)]
    pub gpu_price: T,
    #[serde(default = "one_gpu")]
    pub gpu_count: u32,
}

fn one_gpu() -> u32 {
    1
}

impl<T: Scalar> Default for PerfParams<T> {
    /// Dimensionless mode: `gamma = 1`, no constant term, free GPUs.
    fn default() -> Self {
        Self {
            gamma: T::one(),
            t_comm: T::zero(),
            t_offload: T::zero(),
            gpu_price: T::zero(),
            gpu_count: 1,
        }
    }
}

impl<T: Scalar> PerfParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > T::zero()) {
            return Err(Error::config(format!(
                "gamma = {} must be positive",
                self.gamma
            )));
        }
        for (name, v) in [
            ("t_comm", self.t_comm),
            ("t_offload", self.t_offload),
            ("gpu_price", self.gpu_price),
        ] {
            if !(v.is_finite() && v >= T::zero()) {
                return Err(Error::config(format!("{name} = {v} must be non-negative")));
            }
        }
        if self.gpu_count == 0 {
            return Err(Error::config("gpu_count must be at least 1"));
        }
        Ok(())
    }

    /// The constant term `C = t_comm + t_offload`.
    pub fn constant(&self) -> T {
        self.t_comm + self.t_offload
    }
}

fn check_imbalance<T: Scalar>(name: &str, i: T) -> Result<()> {
    if !(i.is_finite() && i >= T::one()) {
        return Err(Error::input(format!("{name} = {i} must be at least 1")));
    }
    Ok(())
}

/// `gamma * I + t_comm + t_offload`.
pub fn step_time<T: Scalar>(i_agg_gpu: T, p: &PerfParams<T>) -> Result<T> {
    check_imbalance("imbalance", i_agg_gpu)?;
    Ok(p.gamma * i_agg_gpu + p.constant())
}

/// Throughput of a policy relative to a baseline: `(gamma I_base + C) / (gamma I_policy + C)`.
pub fn throughput_ratio<T: Scalar>(i_policy: T, i_base: T, p: &PerfParams<T>) -> Result<T> {
    check_imbalance("policy imbalance", i_policy)?;
    check_imbalance("baseline imbalance", i_base)?;
    let c = p.constant();
    Ok((p.gamma * i_base + c) / (p.gamma * i_policy + c))
}

/// `gpu_price * gpu_count / 3600 * t_token`.
pub fn cost_per_token<T: Scalar>(t_token: T, p: &PerfParams<T>) -> Result<T> {
    if !(t_token.is_finite() && t_token >= T::zero()) {
        return Err(Error::input(format!(
            "token time {t_token} must be non-negative"
        )));
    }
    let gpus = T::from_u32(p.gpu_count).expect("gpu count representable");
    Ok(p.gpu_price * gpus / T::lit(3600.0) * t_token)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfEstimate<T> {
    pub t_step: T,
    pub throughput_ratio_vs_base: T,
    /// Per-token latency is taken as the step time: one token per sequence per step.
    pub cost_per_token: T,
}

/// Step time, throughput relative to `i_base`, and cost for a policy's imbalance.
pub fn estimate<T: Scalar>(i_policy: T, i_base: T, p: &PerfParams<T>) -> Result<PerfEstimate<T>> {
    let t_step = step_time(i_policy, p)?;
    Ok(PerfEstimate {
        t_step,
        throughput_ratio_vs_base: throughput_ratio(i_policy, i_base, p)?,
        cost_per_token: cost_per_token(t_step, p)?,
    })
}
