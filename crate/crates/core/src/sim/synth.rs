//! Synthetic gate-score workloads.
//!
//! Each (batch, layer) context draws its tokens from an independent ChaCha8 stream, so
//! any context can be regenerated on its own and contexts can be produced in parallel.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::trace::{Phase, TraceHeader, TraceRecord};
use crate::error::{Error, Result};
use crate::gate::GateScores;
use crate::routing::{context_rng, LayerBands};

/// Score distribution of one layer band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Generator {
    /// Symmetric Dirichlet(alpha) over all experts.
    Dirichlet { alpha: f64 },
    /// Mass `p_head` on a uniformly drawn head expert, the remainder spread over the
    /// other experts by Dirichlet(alpha_tail).
    Spiked { p_head: f64, alpha_tail: f64 },
}

impl Generator {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Generator::Dirichlet { alpha } => {
                if !(alpha.is_finite() && alpha > 0.0) {
                    return Err(Error::config(format!(
                        "dirichlet alpha = {alpha} must be positive"
                    )));
                }
            }
            Generator::Spiked { p_head, alpha_tail } => {
                if !(p_head > 0.0 && p_head < 1.0) {
                    return Err(Error::config(format!(
                        "p_head = {p_head} must lie in (0, 1)"
                    )));
                }
                if !(alpha_tail.is_finite() && alpha_tail > 0.0) {
                    return Err(Error::config(format!(
                        "alpha_tail = {alpha_tail} must be positive"
                    )));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Generator::Dirichlet { alpha } => dirichlet(alpha, n, rng),
            Generator::Spiked { p_head, alpha_tail } => {
                if n == 1 {
                    return vec![1.0];
                }
                let head = rng.random_range(0..n as u32) as usize;
                let tail = dirichlet(alpha_tail, n - 1, rng);
                let mut out = Vec::with_capacity(n);
                let mut tail = tail.into_iter().map(|t| (1.0 - p_head) * t);
                for e in 0..n {
                    out.push(if e == head {
                        p_head
                    } else {
                        tail.next().expect("n - 1 tail draws")
                    });
                }
                out
            }
        }
    }
}

/// Normalized independent Gamma(alpha, 1) draws; redrawn in the (practically
/// unreachable) case that every draw underflows to zero.
fn dirichlet(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("validated alpha");
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = v.iter().sum();
        if total > 0.0 && total.is_finite() {
            v.iter_mut().for_each(|x| *x /= total);
            return v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorBand {
    /// Inclusive `[first, last]` layer range.
    pub layers: [usize; 2],
    pub generator: Generator,
}

/// Shape and seed of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_layers: usize,
    pub num_experts: usize,
    #[serde(default = "default_tokens_per_batch")]
    pub tokens_per_batch: usize,
    pub num_batches: usize,
    pub bands: Vec<GeneratorBand>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_phase")]
    pub phase: Phase,
}

fn default_tokens_per_batch() -> usize {
    512
}

fn default_phase() -> Phase {
    Phase::Decode
}

impl SyntheticSpec {
    /// A single generator for every layer.
    pub fn uniform(
        num_layers: usize,
        num_experts: usize,
        tokens_per_batch: usize,
        num_batches: usize,
        generator: Generator,
        seed: u64,
    ) -> Self {
        Self {
            num_layers,
            num_experts,
            tokens_per_batch,
            num_batches,
            bands: vec![GeneratorBand {
                layers: [0, num_layers.saturating_sub(1)],
                generator,
            }],
            seed,
            phase: Phase::Decode,
        }
    }

    /// Early and final thirds drawn from `edge`, the middle from `middle`.
    pub fn banded(
        num_layers: usize,
        num_experts: usize,
        tokens_per_batch: usize,
        num_batches: usize,
        edge: Generator,
        middle: Generator,
        seed: u64,
    ) -> Result<Self> {
        let thirds = LayerBands::thirds(num_layers)?;
        let count = thirds.len();
        let bands = thirds
            .ranges()
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| GeneratorBand {
                layers: [lo, hi],
                generator: if count == 3 && i == 1 || count == 1 {
                    middle
                } else {
                    edge
                },
            })
            .collect();
        Ok(Self {
            num_layers,
            num_experts,
            tokens_per_batch,
            num_batches,
            bands,
            seed,
            phase: Phase::Decode,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.num_experts == 0
            || self.tokens_per_batch == 0
            || self.num_batches == 0
        {
            return Err(Error::config("synthetic sizes must all be positive"));
        }
        if self.num_layers > usize::from(u16::MAX) + 1 {
            return Err(Error::config(
                "synthetic workloads support at most 65536 layers",
            ));
        }
        if u32::try_from(self.num_experts).is_err()
            || u32::try_from(self.num_batches).is_err()
            || u32::try_from(self.tokens_per_batch).is_err()
        {
            return Err(Error::config("synthetic sizes must fit in 32 bits"));
        }
        self.layer_bands()?;
        for band in &self.bands {
            band.generator.validate()?;
        }
        Ok(())
    }

    fn layer_bands(&self) -> Result<LayerBands> {
        LayerBands::new(
            self.bands
                .iter()
                .map(|b| (b.layers[0], b.layers[1]))
                .collect(),
            self.num_layers,
        )
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            num_experts: self.num_experts as u32,
            num_layers: self.num_layers as u32,
            phase_present: true,
        }
    }

    fn generator_for(&self, layer: usize) -> Result<Generator> {
        self.bands
            .iter()
            .find(|b| layer >= b.layers[0] && layer <= b.layers[1])
            .map(|b| b.generator)
            .ok_or_else(|| Error::config(format!("layer {layer} has no generator band")))
    }

    /// Token scores of one (batch, layer) context, in token order.
    pub fn context(&self, batch: usize, layer: usize) -> Result<Vec<GateScores<f64>>> {
        let generator = self.generator_for(layer)?;
        let mut rng = context_rng(self.seed, context_stream(batch, layer));
        (0..self.tokens_per_batch)
            .map(|_| GateScores::new(generator.sample(self.num_experts, &mut rng)))
            .collect()
    }
}

/// Stream number of a (batch, layer) context: batch in the high bits, layer in the low 16.
pub fn context_stream(batch: usize, layer: usize) -> u64 {
    ((batch as u64) << 16) | (layer as u64 & 0xFFFF)
}

/// All records of a synthetic workload in (batch, layer, token) order.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<impl Iterator<Item = Result<TraceRecord>> + '_> {
    spec.validate()?;
    let phase = spec.phase;
    Ok((0..spec.num_batches).flat_map(move |batch| {
        (0..spec.num_layers).flat_map(move |layer| {
            let tokens = spec.context(batch, layer);
            let items: Vec<Result<TraceRecord>> = match tokens {
                Ok(tokens) => tokens
                    .into_iter()
                    .enumerate()
                    .map(|(token, scores)| {
                        Ok(TraceRecord {
                            batch: batch as u32,
                            layer: layer as u16,
                            token: token as u32,
                            phase,
                            scores,
                        })
                    })
                    .collect(),
                Err(e) => vec![Err(e)],
            };
            items
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::{entropy, top_k_mass};

    #[test]
    fn deterministic_for_a_seed() {
        let spec = SyntheticSpec::uniform(2, 8, 16, 2, Generator::Dirichlet { alpha: 1.0 }, 5);
        let a: Vec<_> = generate_synthetic(&spec)
            .unwrap()
            .map(Result::unwrap)
            .collect();
        let b: Vec<_> = generate_synthetic(&spec)
            .unwrap()
            .map(Result::unwrap)
            .collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let other = SyntheticSpec { seed: 6, ..spec };
        let c: Vec<_> = generate_synthetic(&other)
            .unwrap()
            .map(Result::unwrap)
            .collect();
        assert_ne!(a, c);
    }

    #[test]
    fn near_uniform_for_huge_alpha() {
        let spec = SyntheticSpec::uniform(1, 8, 500, 1, Generator::Dirichlet { alpha: 1e4 }, 1);
        for s in spec.context(0, 0).unwrap() {
            assert!((top_k_mass(&s, 2).unwrap() - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn spiked_head_dominates() {
        let spec = SyntheticSpec::uniform(
            1,
            8,
            1000,
            1,
            Generator::Spiked {
                p_head: 0.9,
                alpha_tail: 1.0,
            },
            3,
        );
        let tokens = spec.context(0, 0).unwrap();
        assert!(tokens.iter().all(|s| s.max() >= 0.9));
        // heads spread over all experts
        let mut seen = [false; 8];
        for s in &tokens {
            seen[s.ranking()[0]] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn flat_dirichlet_entropy_matches_expectation() {
        // E[H] of a flat Dirichlet over n categories is H_n - 1 = sum_{j=2}^{n} 1/j
        let expected: f64 = (2..=8).map(|j| 1.0 / f64::from(j)).sum();
        let spec =
            SyntheticSpec::uniform(1, 8, 100_000, 1, Generator::Dirichlet { alpha: 1.0 }, 11);
        let tokens = spec.context(0, 0).unwrap();
        let mean = tokens.iter().map(entropy).sum::<f64>() / tokens.len() as f64;
        assert!(
            (mean - expected).abs() < 0.02,
            "mean entropy {mean} vs {expected}"
        );
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SyntheticSpec::uniform(4, 8, 16, 1, Generator::Dirichlet { alpha: 0.0 }, 0);
        assert!(spec.validate().is_err());
        spec.bands[0].generator = Generator::Spiked {
            p_head: 1.0,
            alpha_tail: 1.0,
        };
        assert!(spec.validate().is_err());
        spec.bands[0].generator = Generator::Dirichlet { alpha: 1.0 };
        spec.bands[0].layers = [0, 2];
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        spec.bands[0].layers = [0, 3];
        spec.tokens_per_batch = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn banded_profile_layout() {
        let spec = SyntheticSpec::banded(
            9,
            8,
            4,
            1,
            Generator::Spiked {
                p_head: 0.8,
                alpha_tail: 1.0,
            },
            Generator::Dirichlet { alpha: 1.0 },
            0,
        )
        .unwrap();
        assert_eq!(spec.bands.len(), 3);
        assert!(matches!(
            spec.bands[1].generator,
            Generator::Dirichlet { .. }
        ));
        assert!(matches!(spec.bands[2].generator, Generator::Spiked { .. }));
        spec.validate().unwrap();
    }
}
