use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How an oversized candidate pool is cut down to `c` experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrimMode {
    /// Keep the `c` highest-scoring pool members.
    #[default]
    Top,
    /// Sample `c` pool members uniformly without replacement.
    Random,
}

/// Parameters of the load- and score-aware rule for one layer band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserParams<T> {
    /// Experts selected per token.
    pub k: usize,
    /// Dominance cutoff: `M_k >= eps_high` keeps plain top-k.
    pub eps_high: T,
    /// Pool cutoff as a fraction of the largest score.
    pub t_fix: T,
    /// Working-set cap, `k <= c <= n`.
    pub c: usize,
    #[serde(default)]
    pub trim_mode: TrimMode,
    #[serde(default)]
    pub rng_seed: u64,
}

impl<T: Scalar> LaserParams<T> {
    pub fn new(
        k: usize,
        eps_high: f64,
        t_fix: f64,
        c: usize,
        trim_mode: TrimMode,
        rng_seed: u64,
    ) -> Self {
        Self {
            k,
            eps_high: T::lit(eps_high),
            t_fix: T::lit(t_fix),
            c,
            trim_mode,
            rng_seed,
        }
    }

    /// Checks the parameter ranges against an expert count `n`.
    ///
    /// `eps_high = 1` is admitted so that expansion can be forced for every token
    /// whose top-k mass is below one.
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        if self.k == 0 || self.k > num_experts {
            return Err(Error::param(format!(
                "k = {} must lie in [1, {num_experts}]",
                self.k
            )));
        }
        if self.c < self.k || self.c > num_experts {
            return Err(Error::param(format!(
                "c = {} must lie in [k, n] = [{}, {num_experts}]",
                self.c, self.k
            )));
        }
        if !(self.eps_high > T::zero() && self.eps_high <= T::one()) {
            return Err(Error::param(format!(
                "eps_high = {} must lie in (0, 1]",
                self.eps_high
            )));
        }
        if !(self.t_fix > T::zero() && self.t_fix <= T::one()) {
            return Err(Error::param(format!(
                "t_fix = {} must lie in (0, 1]",
                self.t_fix
            )));
        }
        Ok(())
    }
}

/// Contiguous, disjoint inclusive layer ranges covering `[0, num_layers - 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBands {
    ranges: Vec<(usize, usize)>,
    num_layers: usize,
}

impl LayerBands {
    pub fn new(mut ranges: Vec<(usize, usize)>, num_layers: usize) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::config("layer bands need at least one layer"));
        }
        ranges.sort_unstable();
        let mut next = 0usize;
        for &(lo, hi) in &ranges {
            if lo > hi {
                return Err(Error::config(format!("band [{lo}..{hi}] is empty")));
            }
            if lo > next {
                return Err(Error::config(format!(
                    "uncovered layers [{next}..{}]",
                    lo - 1
                )));
            }
            if lo < next {
                return Err(Error::config(format!(
                    "band [{lo}..{hi}] overlaps a previous band"
                )));
            }
            next = hi + 1;
        }
        if next < num_layers {
            return Err(Error::config(format!(
                "uncovered layers [{next}..{}]",
                num_layers - 1
            )));
        }
        if next > num_layers {
            return Err(Error::config(format!(
                "bands reach layer {} but the model has {num_layers} layers",
                next - 1
            )));
        }
        Ok(Self { ranges, num_layers })
    }

    /// Early / middle / final thirds.
    ///
    /// With `L` layers the early and final bands hold `L / 3` layers each and the middle
    /// band the rest. Fewer than three layers degrade to `[early, final]` (two layers)
    /// or a single band (one layer).
    pub fn thirds(num_layers: usize) -> Result<Self> {
        let ranges = match num_layers {
            0 => return Err(Error::config("layer bands need at least one layer")),
            1 => vec![(0, 0)],
            2 => vec![(0, 0), (1, 1)],
            l => {
                let third = l / 3;
                vec![(0, third - 1), (third, l - third - 1), (l - third, l - 1)]
            }
        };
        Self::new(ranges, num_layers)
    }

    pub fn single(num_layers: usize) -> Result<Self> {
        Self::new(vec![(0, num_layers.saturating_sub(1))], num_layers)
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Index of the band containing `layer`.
    pub fn band_of(&self, layer: usize) -> Result<usize> {
        self.ranges
            .iter()
            .position(|&(lo, hi)| layer >= lo && layer <= hi)
            .ok_or_else(|| {
                Error::config(format!(
                    "layer {layer} is not covered by any band (layers 0..{})",
                    self.num_layers - 1
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band<T> {
    pub first: usize,
    pub last: usize,
    pub params: LaserParams<T>,
}

/// Per-band routing parameters covering every layer exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct BandParams<T> {
    layers: LayerBands,
    bands: Vec<Band<T>>,
}

impl<T: Scalar> BandParams<T> {
    pub fn new(bands: Vec<Band<T>>, num_layers: usize) -> Result<Self> {
        let mut bands = bands;
        bands.sort_by_key(|b| b.first);
        let layers = LayerBands::new(
            bands.iter().map(|b| (b.first, b.last)).collect(),
            num_layers,
        )?;
        Ok(Self { layers, bands })
    }

    pub fn from_bands(layers: &LayerBands, params: Vec<LaserParams<T>>) -> Result<Self> {
        if params.len() != layers.len() {
            return Err(Error::config(format!(
                "{} parameter sets given for {} bands",
                params.len(),
                layers.len()
            )));
        }
        let bands = layers
            .ranges()
            .iter()
            .zip(params)
            .map(|(&(first, last), params)| Band {
                first,
                last,
                params,
            })
            .collect();
        Ok(Self {
            layers: layers.clone(),
            bands,
        })
    }

    pub fn uniform(params: LaserParams<T>, num_layers: usize) -> Result<Self> {
        Self::from_bands(&LayerBands::single(num_layers)?, vec![params])
    }

    pub fn bands(&self) -> &[Band<T>] {
        &self.bands
    }

    pub fn bands_mut(&mut self) -> impl Iterator<Item = &mut LaserParams<T>> {
        self.bands.iter_mut().map(|b| &mut b.params)
    }

    pub fn layer_bands(&self) -> &LayerBands {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.num_layers()
    }

    pub fn resolve(&self, layer: usize) -> Result<&LaserParams<T>> {
        let idx = self.layers.band_of(layer)?;
        Ok(&self.bands[idx].params)
    }

    /// Validates every band's parameters against the expert count.
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        for band in &self.bands {
            band.params
                .validate(num_experts)
                .map_err(|e| Error::config(format!("band [{}..{}]: {e}", band.first, band.last)))?;
        }
        Ok(())
    }
}

/// Parameters of the band containing `layer`.
pub fn resolve_band<T: Scalar>(bands: &BandParams<T>, layer: usize) -> Result<LaserParams<T>> {
    bands.resolve(layer).cloned()
}
