//! Conflict-probability bound and its Monte Carlo counterpart.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::SimError;

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

fn choose2(t: usize) -> f64 {
    (t * t.saturating_sub(1)) as f64 / 2.0
}

/// `C(t, 2) * 2^(-2 (1 - H2(delta)) K)` for watermarks `L = delta K`,
/// `H = (1 - delta) K`. The vanishing `o_K(1)` term of the exponent is
/// dropped, so this is an asymptotic upper bound, not an exact one.
pub fn conflict_bound(k: usize, delta: f64, t: usize) -> Result<f64, SimError> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(SimError::Invalid(format!("delta must lie in (0, 1/2), got {delta}")));
    }
    if k == 0 {
        return Err(SimError::Invalid("K must be positive".into()));
    }
    if t < 2 {
        return Err(SimError::Invalid("t must be at least 2".into()));
    }
    let exponent = -2.0 * (1.0 - binary_entropy(delta)) * k as f64;
    Ok(choose2(t) * exponent.exp2())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRow {
    pub k: usize,
    pub delta: f64,
    pub t: usize,
    pub h: usize,
    pub l: usize,
    pub trials: usize,
    pub conflicts: usize,
    pub rate: f64,
    /// Standard error of `rate`.
    pub sigma: f64,
    pub bound: f64,
}

impl MonteCarloRow {
    /// Observed rate stays below the bound plus three standard errors.
    pub fn consistent(&self) -> bool {
        self.rate <= self.bound + 3.0 * self.sigma
    }
}

/// One trial: `t` failed subjects each receive `k` reports, interleaved in a
/// uniform random order, at a process applying the aggregation rule with
/// watermarks `(h, l)`. Returns true if the first proposal misses a subject.
pub fn conflict_trial(k: usize, h: usize, l: usize, t: usize, rng: &mut ChaCha8Rng) -> bool {
    let mut order: Vec<usize> = (0..t).flat_map(|s| std::iter::repeat_n(s, k)).collect();
    order.shuffle(rng);
    let mut tally = vec![0usize; t];
    for s in order {
        tally[s] += 1;
        let stable = tally.iter().any(|c| *c >= h);
        let unstable = tally.iter().any(|c| *c >= l && *c < h);
        if stable && !unstable {
            return tally.iter().any(|c| *c < h);
        }
    }
    false
}

pub fn monte_carlo(k: usize, delta: f64, t: usize, trials: usize, seed: u64) -> Result<MonteCarloRow, SimError> {
    let bound = conflict_bound(k, delta, t)?;
    // The bound is stated for L = delta K exactly; rounding would compare
    // against watermarks the bound does not describe.
    let lf = delta * k as f64;
    let l = lf.round() as usize;
    if (lf - l as f64).abs() > 1e-9 || l == 0 {
        return Err(SimError::Invalid(format!(
            "delta*K must be a positive integer (delta={delta}, K={k})"
        )));
    }
    let h = k - l;
    let chunks = 64;
    let per = trials.div_ceil(chunks);
    let conflicts: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((c as u64) << 32) ^ (k as u64) << 8 ^ t as u64);
            let n = per.min(trials.saturating_sub(c * per));
            (0..n).filter(|_| conflict_trial(k, h, l, t, &mut rng)).count()
        })
        .sum();
    let rate = conflicts as f64 / trials as f64;
    let sigma = (rate * (1.0 - rate) / trials as f64).sqrt();
    Ok(MonteCarloRow {
        k,
        delta,
        t,
        h,
        l,
        trials,
        conflicts,
        rate,
        sigma,
        bound,
    })
}
