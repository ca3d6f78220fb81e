//! Gate-score shape statistics: top-k mass, entropy, routing regimes and their
//! per-layer aggregates, plus a mechanical calibration of the dominance cutoff.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{BandParams, LaserParams, LayerBands};
use crate::scalar::{cmp_finite, Scalar};
use crate::stats::nearest_rank_sorted;

/// Deviation of the score sum from 1 accepted without touching the values.
pub const SUM_TOLERANCE: f64 = 1e-6;
/// Largest deviation of the score sum from 1 that ingest repairs by renormalizing.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

/// One token's probability vector over the experts of a layer.
///
/// Construction validates the vector: at least one entry, all entries finite and
/// non-negative, and a sum within [`RENORMALIZE_TOLERANCE`] of one. Vectors whose sum
/// is off by more than [`SUM_TOLERANCE`] are renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct GateScores<T> {
    scores: Vec<T>,
}

impl<T: Scalar> GateScores<T> {
    pub fn new(scores: Vec<T>) -> Result<Self> {
        let sum = checked_sum(&scores)?;
        let deviation = (sum - 1.0).abs();
        if deviation > RENORMALIZE_TOLERANCE {
            return Err(Error::input(format!(
                "gate scores sum to {sum}, more than {RENORMALIZE_TOLERANCE} away from 1"
            )));
        }
        if deviation > SUM_TOLERANCE {
            return Ok(Self::renormalized(scores));
        }
        Ok(Self { scores })
    }

    /// Normalizes arbitrary non-negative weights (e.g. unnormalized softmax numerators).
    pub fn from_weights(weights: Vec<T>) -> Result<Self> {
        checked_sum(&weights)?;
        Ok(Self::renormalized(weights))
    }

    fn renormalized(mut scores: Vec<T>) -> Self {
        let total: T = scores.iter().copied().sum();
        for s in &mut scores {
            *s = *s / total;
        }
        Self { scores }
    }

    /// Number of experts `n`.
    #[inline]
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.scores
    }

    #[inline]
    pub fn get(&self, expert: usize) -> T {
        self.scores[expert]
    }

    pub fn into_inner(self) -> Vec<T> {
        self.scores
    }

    /// Expert indices ordered by descending score; equal scores keep ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| cmp_finite(self.scores[b], self.scores[a]).then(a.cmp(&b)));
        order
    }

    /// The `k` highest-scoring experts in ranking order.
    pub fn top_k(&self, k: usize) -> Result<Vec<usize>> {
        check_k(k, self.len())?;
        let mut order = self.ranking();
        order.truncate(k);
        Ok(order)
    }

    /// Largest score `s_(1)`.
    pub fn max(&self) -> T {
        self.scores
            .iter()
            .copied()
            .fold(T::zero(), |acc, s| if s > acc { s } else { acc })
    }
}

fn checked_sum<T: Scalar>(scores: &[T]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::input("gate scores must cover at least one expert"));
    }
    let mut sum = 0.0_f64;
    for (i, s) in scores.iter().enumerate() {
        let v = s.as_f64();
        if !v.is_finite() {
            return Err(Error::input(format!("gate score {i} is not finite")));
        }
        if v < 0.0 {
            return Err(Error::input(format!("gate score {i} is negative ({v})")));
        }
        sum += v;
    }
    if sum <= 0.0 {
        return Err(Error::input("gate scores are all zero"));
    }
    Ok(sum)
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::param(format!("k = {k} must lie in [1, {n}]")));
    }
    Ok(())
}

/// Sum of the `k` largest scores, `M_k`.
pub fn top_k_mass<T: Scalar>(scores: &GateScores<T>, k: usize) -> Result<T> {
    Ok(scores.top_k(k)?.into_iter().map(|i| scores.get(i)).sum())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(scores: &GateScores<T>) -> T {
    let h: T = scores
        .as_slice()
        .iter()
        .filter(|s| **s > T::zero())
        .map(|&s| -s * s.ln())
        .sum();
    h.max(T::zero())
}

/// Entropy divided by its maximum `ln n`; zero for a single expert.
pub fn normalized_entropy<T: Scalar>(scores: &GateScores<T>) -> T {
    if scores.len() < 2 {
        return T::zero();
    }
    entropy(scores) / T::from_usize(scores.len()).expect("n representable").ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegimeLabel {
    SingleHead,
    Plateau,
    Smooth,
}

/// Cutoffs separating the three regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds<T> {
    /// `s_(1) >= dominance` labels a token single-head.
    pub dominance: T,
    /// Otherwise `s_(2) / s_(1) >= plateau` labels it plateau.
    pub plateau: T,
}

impl<T: Scalar> Default for RegimeThresholds<T> {
    fn default() -> Self {
        Self {
            dominance: T::lit(0.6),
            plateau: T::lit(0.8),
        }
    }
}

impl<T: Scalar> RegimeThresholds<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.dominance > T::zero() && self.dominance < T::one()) {
            return Err(Error::param(format!(
                "dominance threshold {} must lie in (0, 1)",
                self.dominance
            )));
        }
        if !(self.plateau > T::zero() && self.plateau <= T::one()) {
            return Err(Error::param(format!(
                "plateau threshold {} must lie in (0, 1]",
                self.plateau
            )));
        }
        Ok(())
    }
}

pub fn classify_regime<T: Scalar>(
    scores: &GateScores<T>,
    thresholds: &RegimeThresholds<T>,
) -> RegimeLabel {
    if scores.len() < 2 {
        return RegimeLabel::SingleHead;
    }
    let ranking = scores.ranking();
    let first = scores.get(ranking[0]);
    let second = scores.get(ranking[1]);
    if first >= thresholds.dominance {
        RegimeLabel::SingleHead
    } else if second / first >= thresholds.plateau {
        RegimeLabel::Plateau
    } else {
        RegimeLabel::Smooth
    }
}

/// Per-layer summary of gate-score shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats<T> {
    pub layer: usize,
    pub mean_mk: T,
    pub entropy_p25: T,
    pub entropy_p50: T,
    pub entropy_p75: T,
    pub frac_single_head: T,
    pub frac_plateau: T,
    pub frac_smooth: T,
    pub tokens: u64,
}

impl<T: Scalar> LayerStats<T> {
    pub const CSV_HEADER: &'static str =
        "layer,mean_Mk,entropy_p25,entropy_p50,entropy_p75,frac_single_head,frac_plateau,frac_smooth,tokens";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.layer,
            self.mean_mk,
            self.entropy_p25,
            self.entropy_p50,
            self.entropy_p75,
            self.frac_single_head,
            self.frac_plateau,
            self.frac_smooth,
            self.tokens
        )
    }

    pub fn regime_fractions(&self) -> [T; 3] {
        [self.frac_single_head, self.frac_plateau, self.frac_smooth]
    }
}

#[derive(Debug, Clone, Default)]
struct LayerSamples<T> {
    mk: Vec<T>,
    entropy: Vec<T>,
    regimes: [u64; 3],
}

/// Mergeable per-layer sample store behind [`aggregate_layer_stats`].
///
/// Raw samples are retained so percentiles of a merged accumulator are exactly the
/// percentiles of the concatenated streams.
#[derive(Debug, Clone)]
pub struct LayerStatsAccumulator<T> {
    k: usize,
    thresholds: RegimeThresholds<T>,
    layers: BTreeMap<usize, LayerSamples<T>>,
}

impl<T: Scalar> LayerStatsAccumulator<T> {
    pub fn new(k: usize, thresholds: RegimeThresholds<T>) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        thresholds.validate()?;
        Ok(Self {
            k,
            thresholds,
            layers: BTreeMap::new(),
        })
    }

    pub fn push(&mut self, layer: usize, scores: &GateScores<T>) -> Result<()> {
        let mk = top_k_mass(scores, self.k)?;
        let h = entropy(scores);
        let regime = classify_regime(scores, &self.thresholds);
        let slot = self.layers.entry(layer).or_default();
        slot.mk.push(mk);
        slot.entropy.push(h);
        slot.regimes[regime_slot(regime)] += 1;
        Ok(())
    }

    /// Folds `other` into `self`. Both must use the same `k` and thresholds.
    pub fn merge(&mut self, other: Self) -> Result<()> {
        if other.k != self.k || other.thresholds != self.thresholds {
            return Err(Error::param(
                "cannot merge accumulators with different k or thresholds",
            ));
        }
        for (layer, samples) in other.layers {
            let slot = self.layers.entry(layer).or_default();
            slot.mk.extend(samples.mk);
            slot.entropy.extend(samples.entropy);
            for (a, b) in slot.regimes.iter_mut().zip(samples.regimes) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Per-token `M_k` samples of one layer, in push order.
    pub fn mk_samples(&self, layer: usize) -> Option<&[T]> {
        self.layers.get(&layer).map(|s| s.mk.as_slice())
    }

    pub fn finish(&self) -> Vec<LayerStats<T>> {
        self.layers
            .iter()
            .filter(|(_, s)| !s.mk.is_empty())
            .map(|(&layer, s)| {
                let count = s.mk.len();
                let n = T::from_usize(count).expect("count representable");
                let mut entropy = s.entropy.clone();
                entropy.sort_by(|a, b| cmp_finite(*a, *b));
                let pct = |p| nearest_rank_sorted(&entropy, p).expect("nonempty");
                let frac = |c: u64| T::from_count(c) / n;
                LayerStats {
                    layer,
                    mean_mk: s.mk.iter().copied().sum::<T>() / n,
                    entropy_p25: pct(25.0),
                    entropy_p50: pct(50.0),
                    entropy_p75: pct(75.0),
                    frac_single_head: frac(s.regimes[0]),
                    frac_plateau: frac(s.regimes[1]),
                    frac_smooth: frac(s.regimes[2]),
                    tokens: count as u64,
                }
            })
            .collect()
    }
}

fn regime_slot(label: RegimeLabel) -> usize {
    match label {
        RegimeLabel::SingleHead => 0,
        RegimeLabel::Plateau => 1,
        RegimeLabel::Smooth => 2,
    }
}

/// Per-layer mean `M_k`, entropy quartiles and regime fractions of a token stream.
/// Layers without tokens are omitted; an empty stream yields an empty list.
pub fn aggregate_layer_stats<'a, T, I>(
    tokens: I,
    k: usize,
    thresholds: RegimeThresholds<T>,
) -> Result<Vec<LayerStats<T>>>
where
    T: Scalar,
    I: IntoIterator<Item = (usize, &'a GateScores<T>)>,
{
    let mut acc = LayerStatsAccumulator::new(k, thresholds)?;
    for (layer, scores) in tokens {
        acc.push(layer, scores)?;
    }
    Ok(acc.finish())
}

/// Floor and ceiling applied to suggested dominance cutoffs so they stay inside (0, 1).
const SUGGEST_CLAMP: f64 = 1e-6;

/// Picks a dominance cutoff per band from prefill statistics.
///
/// LASER expands a token when `M_k < eps_high`, so the cutoff for a band is the
/// nearest-rank quantile at level `target_expansion_rate` of the band's per-layer mean
/// `M_k`: roughly that fraction of the band's layers then falls below the cutoff. Every
/// other parameter (`k`, `t_fix`, `c`, trimming, seed) is copied from `template`.
pub fn suggest_parameters<T: Scalar>(
    prefill_stats: &[LayerStats<T>],
    bands: &LayerBands,
    target_expansion_rate: T,
    template: &LaserParams<T>,
) -> Result<BandParams<T>> {
    if !(target_expansion_rate > T::zero() && target_expansion_rate < T::one()) {
        return Err(Error::param(format!(
            "target expansion rate {target_expansion_rate} must lie in (0, 1)"
        )));
    }
    let level = target_expansion_rate.as_f64() * 100.0;
    let lo = T::lit(SUGGEST_CLAMP);
    let hi = T::one() - T::lit(SUGGEST_CLAMP);
    let mut per_band = Vec::with_capacity(bands.len());
    for &(first, last) in bands.ranges() {
        let mut mks: Vec<T> = prefill_stats
            .iter()
            .filter(|s| s.layer >= first && s.layer <= last)
            .map(|s| s.mean_mk)
            .collect();
        if mks.is_empty() {
            return Err(Error::config(format!(
                "band [{first}..{last}] has no layer statistics"
            )));
        }
        mks.sort_by(|a, b| cmp_finite(*a, *b));
        let q = nearest_rank_sorted(&mks, level).expect("nonempty");
        per_band.push(LaserParams {
            eps_high: q.max(lo).min(hi),
            ..template.clone()
        });
    }
    BandParams::from_bands(bands, per_band)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::TrimMode;

    fn gs(v: &[f64]) -> GateScores<f64> {
        GateScores::new(v.to_vec()).unwrap()
    }

    #[test]
    fn top_k_mass_examples() {
        assert!((top_k_mass(&gs(&[0.5, 0.3, 0.1, 0.1]), 2).unwrap() - 0.8).abs() < 1e-15);
        assert!((top_k_mass(&gs(&[0.125; 8]), 2).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(top_k_mass(&gs(&[0.05, 0.95]), 1).unwrap(), 0.95);
        assert!(matches!(
            top_k_mass(&gs(&[0.5, 0.5]), 3),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            top_k_mass(&gs(&[0.5, 0.5]), 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&gs(&[0.125; 8])) - 8f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&gs(&[0.0, 1.0, 0.0])), 0.0);
        assert!((entropy(&gs(&[0.5, 0.5, 0.0, 0.0])) - 2f64.ln()).abs() < 1e-15);
        assert!((normalized_entropy(&gs(&[0.25; 4])) - 1.0).abs() < 1e-12);
        assert_eq!(normalized_entropy(&gs(&[1.0])), 0.0);
    }

    #[test]
    fn regime_examples() {
        let t = RegimeThresholds::default();
        assert_eq!(
            classify_regime(&gs(&[0.9, 0.05, 0.05]), &t),
            RegimeLabel::SingleHead
        );
        assert_eq!(
            classify_regime(&gs(&[0.4, 0.38, 0.22]), &t),
            RegimeLabel::Plateau
        );
        assert_eq!(
            classify_regime(&gs(&[0.4, 0.2, 0.2, 0.2]), &t),
            RegimeLabel::Smooth
        );
        assert_eq!(classify_regime(&gs(&[1.0]), &t), RegimeLabel::SingleHead);
    }

    #[test]
    fn ingest_validation() {
        assert!(GateScores::new(vec![0.5_f64, 0.5]).is_ok());
        // within repair tolerance: renormalized
        let s = GateScores::new(vec![0.5005_f64, 0.5]).unwrap();
        assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // untouched when already within 1e-6
        let raw = vec![0.3_f32, 0.7];
        assert_eq!(
            GateScores::new(raw.clone()).unwrap().as_slice(),
            raw.as_slice()
        );
        assert!(GateScores::new(vec![0.6_f64, 0.6]).is_err());
        assert!(GateScores::new(vec![-0.1_f64, 1.1]).is_err());
        assert!(GateScores::new(vec![f64::NAN, 1.0]).is_err());
        assert!(GateScores::<f64>::new(vec![]).is_err());
        assert!(GateScores::from_weights(vec![0.0_f64, 0.0]).is_err());
        assert!(GateScores::from_weights(vec![f64::INFINITY, 1.0]).is_err());
        let w = GateScores::from_weights(vec![2.0_f64, 6.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(gs(&[0.25, 0.25, 0.25, 0.25]).ranking(), vec![0, 1, 2, 3]);
        assert_eq!(gs(&[0.1, 0.6, 0.3]).top_k(2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn layer_stats_examples() {
        let a = gs(&[0.5, 0.3, 0.2]);
        let b = gs(&[0.4, 0.2, 0.2, 0.2]);
        let stats =
            aggregate_layer_stats([(0, &a), (0, &b)], 2, RegimeThresholds::default()).unwrap();
        assert_eq!(stats.len(), 1);
        assert!((stats[0].mean_mk - 0.7).abs() < 1e-12);
        assert_eq!(stats[0].tokens, 2);

        let one_hot = gs(&[0.0, 1.0, 0.0, 0.0]);
        let stats = aggregate_layer_stats(
            [(3, &one_hot), (3, &one_hot)],
            2,
            RegimeThresholds::default(),
        )
        .unwrap();
        assert_eq!(stats[0].layer, 3);
        assert_eq!(stats[0].entropy_p50, 0.0);
        assert_eq!(stats[0].regime_fractions(), [1.0, 0.0, 0.0]);

        let empty: Vec<(usize, &GateScores<f64>)> = Vec::new();
        assert!(aggregate_layer_stats(empty, 2, RegimeThresholds::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn suggest_constant_and_missing_band() {
        let mk = |layer, mean_mk| LayerStats {
            layer,
            mean_mk,
            entropy_p25: 0.0,
            entropy_p50: 0.0,
            entropy_p75: 0.0,
            frac_single_head: 1.0,
            frac_plateau: 0.0,
            frac_smooth: 0.0,
            tokens: 10,
        };
        let stats: Vec<_> = (0..6).map(|l| mk(l, 0.95)).collect();
        let bands = LayerBands::thirds(6).unwrap();
        let template = LaserParams::<f64>::new(2, 0.5, 0.6, 4, TrimMode::Top, 0);
        let bp = suggest_parameters(&stats, &bands, 0.5, &template).unwrap();
        for band in bp.bands() {
            assert!((band.params.eps_high - 0.95).abs() < 1e-12);
            assert_eq!(band.params.t_fix, 0.6);
        }
        let partial: Vec<_> = (0..4).map(|l| mk(l, 0.95)).collect();
        assert!(matches!(
            suggest_parameters(&partial, &bands, 0.5, &template),
            Err(Error::Config(_))
        ));
        assert!(suggest_parameters(&stats, &bands, 1.0, &template).is_err());
    }
}
