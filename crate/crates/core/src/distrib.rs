//! Seeded sampling kernels.
//!
//! Every kernel takes an explicit generator so that callers control the
//! stream discipline. Gamma variates are drawn in log space: shapes far
//! below one (topic births, empty topics) would otherwise underflow to zero
//! and poison the Beta and Dirichlet draws built on top of them.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::DistribError;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Smallest value a Gamma draw (and a positive Dirichlet component) may take.
pub const GAMMA_FLOOR: f64 = 1e-300;
/// Beta draws are clamped to `[BETA_EPS, 1 - BETA_EPS]` so that `-ln(1 - xi)` stays finite.
pub const BETA_EPS: f64 = 1e-12;

/// Identifies one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    RngStream::new(seed, stream).rng()
}

/// SplitMix64 finalizer; mixes tags into a child seed.
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_positive(name: &'static str, value: f64) -> Result<(), DistribError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(DistribError::NonPositive { name, value })
    }
}

/// Uniform on (0, 1].
#[inline]
fn open_unit(rng: &mut Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Log of a Gamma(shape, 1) variate. `shape` must be positive.
pub(crate) fn ln_gamma_variate(shape: f64, rng: &mut Rng) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("shape checked").sample(rng);
        g.max(f64::MIN_POSITIVE).ln()
    } else {
        // G(a) = G(a + 1) * U^(1/a)
        let g = Gamma::new(shape + 1.0, 1.0).expect("shape checked").sample(rng);
        g.max(f64::MIN_POSITIVE).ln() + open_unit(rng).ln() / shape
    }
}

/// Gamma with shape/scale parameterization, floored at [`GAMMA_FLOOR`].
pub fn gamma(shape: f64, scale: f64, rng: &mut Rng) -> Result<f64, DistribError> {
    check_positive("shape", shape)?;
    check_positive("scale", scale)?;
    let x = (ln_gamma_variate(shape, rng) + scale.ln()).exp();
    Ok(if x.is_finite() { x.max(GAMMA_FLOOR) } else { f64::MAX })
}

/// Beta(a, b), clamped to `[BETA_EPS, 1 - BETA_EPS]`.
pub fn beta(a: f64, b: f64, rng: &mut Rng) -> Result<f64, DistribError> {
    check_positive("a", a)?;
    check_positive("b", b)?;
    let la = ln_gamma_variate(a, rng);
    let lb = ln_gamma_variate(b, rng);
    // a / (a + b) in log space
    let x = 1.0 / (1.0 + (lb - la).exp());
    Ok(x.clamp(BETA_EPS, 1.0 - BETA_EPS))
}

/// Dirichlet draw. Zero concentrations yield exactly zero.
pub fn dirichlet(concentration: &[f64], rng: &mut Rng) -> Result<Vec<f64>, DistribError> {
    let mut out = vec![0.0; concentration.len()];
    dirichlet_into(concentration, &mut out, rng)?;
    Ok(out)
}

/// Allocation-free form of [`dirichlet`]; `out` must match `concentration` in length.
pub fn dirichlet_into(
    concentration: &[f64],
    out: &mut [f64],
    rng: &mut Rng,
) -> Result<(), DistribError> {
    assert_eq!(concentration.len(), out.len());
    let mut any = false;
    let mut max = f64::NEG_INFINITY;
    for (o, &a) in out.iter_mut().zip(concentration) {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(DistribError::BadWeights);
        }
        if a > 0.0 {
            any = true;
            let l = ln_gamma_variate(a, rng);
            *o = l;
            max = max.max(l);
        } else {
            *o = f64::NEG_INFINITY;
        }
    }
    if !any {
        return Err(DistribError::EmptySupport);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for (o, &a) in out.iter_mut().zip(concentration) {
        if a > 0.0 {
            *o = (*o / sum).max(GAMMA_FLOOR);
        } else {
            *o = 0.0;
        }
    }
    Ok(())
}

/// Multinomial counts for a normalized probability vector.
pub fn multinomial_counts(n: u64, probs: &[f64], rng: &mut Rng) -> Result<Vec<u64>, DistribError> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        return Err(DistribError::BadWeights);
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DistribError::NotNormalized(sum));
    }
    let mut out = vec![0u64; probs.len()];
    multinomial_weights(n, probs, &mut out, rng)?;
    Ok(out)
}

/// Multinomial split of `n` proportional to non-negative `weights` (not necessarily normalized).
/// `out` is overwritten.
pub fn multinomial_weights(
    n: u64,
    weights: &[f64],
    out: &mut [u64],
    rng: &mut Rng,
) -> Result<(), DistribError> {
    assert_eq!(weights.len(), out.len());
    out.iter_mut().for_each(|o| *o = 0);
    if n == 0 {
        return Ok(());
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(DistribError::BadWeights);
    }
    if n <= 16 {
        // token-by-token inversion
        for _ in 0..n {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    chosen = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            out[chosen.expect("positive total")] += 1;
        }
        return Ok(());
    }
    let last = weights
        .iter()
        .rposition(|&w| w > 0.0)
        .expect("positive total");
    let mut left = n;
    let mut mass = total;
    for (i, &w) in weights.iter().enumerate() {
        if left == 0 {
            break;
        }
        if w <= 0.0 {
            continue;
        }
        if i == last {
            out[i] = left;
            break;
        }
        let p = (w / mass).clamp(0.0, 1.0);
        let k = Binomial::new(left, p).expect("p in [0,1]").sample(rng);
        out[i] = k;
        left -= k;
        mass -= w;
        if mass <= 0.0 {
            out[last] += left;
            break;
        }
    }
    Ok(())
}

/// Chinese-restaurant-table count: the number of occupied tables after seating
/// `m` customers with concentration `r`, as a sum of Bernoulli(r / (n - 1 + r)).
pub fn crt(m: u64, r: f64, rng: &mut Rng) -> Result<u64, DistribError> {
    check_positive("r", r)?;
    if m == 0 {
        return Ok(0);
    }
    // the first customer always opens a table
    let mut tables = 1;
    for n in 1..m {
        if rng.random::<f64>() * (n as f64 + r) < r {
            tables += 1;
        }
    }
    Ok(tables)
}

pub fn bernoulli(p: f64, rng: &mut Rng) -> Result<bool, DistribError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DistribError::Probability(p));
    }
    Ok(rng.random::<f64>() < p)
}

pub fn poisson(rate: f64, rng: &mut Rng) -> Result<u64, DistribError> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(DistribError::NonPositive { name: "rate", value: rate });
    }
    if rate == 0.0 {
        return Ok(0);
    }
    let x: f64 = Poisson::new(rate).expect("rate checked").sample(rng);
    Ok(x as u64)
}

/// `ln B(a, b)`.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}
