use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LaserParams, LoadVector, RoutePath, RoutingDecision, TrimMode};
use crate::error::{Error, Result};
use crate::gate::GateScores;
use crate::scalar::{cmp_finite, Scalar};

/// Routes one token with the load- and score-aware rule.
///
/// 1. If the top-k mass `M_k >= eps_high`, return the top-k experts.
/// 2. Otherwise form the pool `{i : s_i >= t_fix * s_(1)}` united with the top-k set.
/// 3. Trim the pool to `c* = min(c, m)` members: the highest-scoring ones (`Top`) or a
///    uniform sample without replacement (`Random`, drawn from `rng`).
/// 4. Order the working set by ascending load, then descending score, then ascending
///    index, and return its first `k` members.
///
/// `rng` is only consulted in `Random` mode. Random trimming lists the pool by ascending
/// expert index and takes the first `c*` positions of a Fisher-Yates shuffle, drawing
/// each swap offset as a `u32` so the sequence is identical on every platform.
pub fn route_laser<T: Scalar, R: RngCore + ?Sized>(
    scores: &GateScores<T>,
    loads: &LoadVector,
    params: &LaserParams<T>,
    rng: &mut R,
) -> Result<RoutingDecision> {
    let n = scores.len();
    if loads.len() != n {
        return Err(Error::input(format!(
            "{n} gate scores but {} expert loads",
            loads.len()
        )));
    }
    params.validate(n)?;
    let k = params.k;

    let ranking = scores.ranking();
    if k == n {
        return Ok(RoutingDecision::top_k(ranking));
    }

    let top_mass: T = ranking[..k].iter().map(|&i| scores.get(i)).sum();
    if top_mass >= params.eps_high {
        return Ok(RoutingDecision::top_k(ranking[..k].to_vec()));
    }

    // The thresholded set and the top-k set are both prefixes of the ranking,
    // so their union is the longer prefix.
    let cutoff = params.t_fix * scores.get(ranking[0]);
    let above = ranking
        .iter()
        .take_while(|&&i| scores.get(i) >= cutoff)
        .count();
    let pool_size = above.max(k);
    let working = params.c.min(pool_size);

    let mut candidates: Vec<usize> = match params.trim_mode {
        TrimMode::Top => ranking[..working].to_vec(),
        TrimMode::Random => {
            let mut pool = ranking[..pool_size].to_vec();
            pool.sort_unstable();
            fisher_yates_prefix(&mut pool, working, rng);
            pool.truncate(working);
            pool
        }
    };

    candidates.sort_by(|&a, &b| {
        loads
            .get(a)
            .cmp(&loads.get(b))
            .then_with(|| cmp_finite(scores.get(b), scores.get(a)))
            .then(a.cmp(&b))
    });
    candidates.truncate(k);

    Ok(RoutingDecision {
        selected: candidates,
        path: RoutePath::Expanded,
        pool_size,
        working_set_size: working,
    })
}

/// Shuffles the first `count` positions of `items` into a uniform sample.
fn fisher_yates_prefix<R: RngCore + ?Sized>(items: &mut [usize], count: usize, rng: &mut R) {
    let len = items.len();
    for i in 0..count.min(len) {
        let span = u32::try_from(len - i).expect("pool fits in u32");
        let j = i + rng.random_range(0..span) as usize;
        items.swap(i, j);
    }
}

/// Seeded generator used for random trimming and synthetic workloads.
///
/// ChaCha8 keyed by the 64-bit seed, with the stream number selecting an independent
/// sequence per routing context.
pub fn context_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Identifier of the generator algorithm, recorded in experiment metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng(seed_from_u64, stream)";

/// A [`route_laser`] front end owning its parameters and random generator.
#[derive(Debug, Clone)]
pub struct LaserRouter<T> {
    params: LaserParams<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> LaserRouter<T> {
    /// Seeds the generator from `params.rng_seed` on stream 0.
    pub fn new(params: LaserParams<T>) -> Self {
        Self::with_stream(params, 0)
    }

    pub fn with_stream(params: LaserParams<T>, stream: u64) -> Self {
        let rng = context_rng(params.rng_seed, stream);
        Self { params, rng }
    }

    pub fn params(&self) -> &LaserParams<T> {
        &self.params
    }

    pub fn route(&mut self, scores: &GateScores<T>, loads: &LoadVector) -> Result<RoutingDecision> {
        route_laser(scores, loads, &self.params, &mut self.rng)
    }
}
