//! The coupled topic chain: a backward filter that propagates latent word
//! counts from the last slice to the first, and a forward pass that draws
//! topics, couplings and scales in closed form given those counts.

use rayon::prelude::*;

use crate::distrib::{self, mix_seed, stream_rng, GAMMA_FLOOR};
use crate::error::Result;
use crate::model::{Mode, ModelState};

const TAG_BACKWARD: u64 = 0x21;
const TAG_PHI: u64 = 0x22;
const TAG_COUPLING: u64 = 0x23;
const TAG_SCALES: u64 = 0x24;
const TAG_MASK: u64 = 0x25;

/// Stand-in Beta shape for a topic that holds no counts.
pub const EMPTY_TOPIC_SHAPE: f64 = 1e-3;

/// Latent counts for the transition from slice `t - 1` into slice `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionFilter {
    /// `ξ_{k_t}`; zero for topics without incoming coupling mass.
    pub xi: Vec<f64>,
    /// Topics whose incoming coupling mass is zero; they fall back to the flat prior.
    pub fallback: Vec<bool>,
    /// `y_{w k_t}`, `K_t × V`.
    pub y_wk: Vec<Vec<u32>>,
    /// Per topic `k_t`, sparse `(w, k_{t-1}, count)` triples of `y_{w k_t k_{t-1}}`.
    pub y_split: Vec<Vec<(u32, u32, u32)>>,
    /// `z_{w k_{t-1}}`, `K_{t-1} × V`: counts handed back to slice `t - 1`.
    pub z: Vec<Vec<u32>>,
    /// `y_{· k_t k_{t-1}}`, `K_t × K_{t-1}`.
    pub y_agg: Vec<Vec<u64>>,
}

impl TransitionFilter {
    /// `-ln(1 - ξ_k)`.
    pub fn log_rate(&self, k: usize) -> f64 {
        -(1.0 - self.xi[k]).ln()
    }
}

/// Output of one backward pass; `transitions[0]` is always `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCache {
    pub transitions: Vec<Option<TransitionFilter>>,
}

impl FilterCache {
    pub fn empty(num_slices: usize) -> Self {
        FilterCache {
            transitions: vec![None; num_slices],
        }
    }

    /// Counts propagated into topic `k` of slice `t` from slice `t + 1`.
    pub fn z(&self, t: usize, k: usize) -> Option<&[u32]> {
        self.transitions
            .get(t + 1)
            .and_then(Option::as_ref)
            .map(|f| f.z[k].as_slice())
    }

    /// `Σ_{k_{t+1}} y_{· k_{t+1} k}`: latent counts topic `k` of slice `t` passes on.
    pub fn successor_mass(&self, t: usize, k: usize) -> u64 {
        match self.transitions.get(t + 1).and_then(Option::as_ref) {
            Some(f) => f.y_agg.iter().map(|row| row.get(k).copied().unwrap_or(0)).sum(),
            None => 0,
        }
    }
}

/// Redraws the dropout indicators of every transition, `m ~ Bern(ρ)`.
pub fn resample_dropout_masks(state: &mut ModelState, iter_seed: u64) -> Result<()> {
    if state.hyper.mode != Mode::RctmD {
        return Ok(());
    }
    let rho = state.hyper.rho;
    for t in 1..state.num_slices() {
        let n = state.slices[t - 1].num_topics();
        let mut rng = stream_rng(mix_seed(iter_seed, TAG_MASK), t as u64);
        state.slices[t].dropout_mask = resample_dropout_mask(n, rho, &mut rng)?;
    }
    Ok(())
}

pub fn resample_dropout_mask(len: usize, rho: f64, rng: &mut distrib::Rng) -> Result<Vec<bool>> {
    (0..len)
        .map(|_| distrib::bernoulli(rho, rng).map_err(Into::into))
        .collect()
}

/// `ψ_{k_t} = Σ_{k_{t-1}} β̃ φ_{k_{t-1}}` for every topic of slice `t ≥ 1`,
/// plus the total coupling mass `ψ_{·k_t} = Σ β̃`.
fn incoming_priors(state: &ModelState, t: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let b = state.effective_coupling(t).expect("slice t ≥ 1 has couplings");
    let prev = &state.slices[t - 1];
    let k = state.slices[t].num_topics();
    let v = state.vocab_size;
    let mut psi = vec![vec![0.0; v]; k];
    let mut mass = vec![0.0; k];
    for (j, row) in b.iter().enumerate() {
        for kk in 0..k {
            let beta = row[kk];
            if beta > 0.0 {
                mass[kk] += beta;
                for (p, &f) in psi[kk].iter_mut().zip(&prev.phi[j]) {
                    *p += beta * f;
                }
            }
        }
    }
    (psi, mass)
}

/// Backward pass from the last slice down to the second.
pub fn backward_filter(state: &ModelState, iter_seed: u64) -> Result<FilterCache> {
    let n_slices = state.num_slices();
    let mut cache = FilterCache::empty(n_slices);
    let v = state.vocab_size;
    for t in (1..n_slices).rev() {
        let b = state.effective_coupling(t).expect("coupling");
        let prev = &state.slices[t - 1];
        let k_prev = prev.num_topics();
        let k = state.slices[t].num_topics();
        let assign = &state.assignments[t];
        let z_in = cache.transitions.get(t + 1).and_then(Option::as_ref).map(|f| &f.z);
        let seed = mix_seed(mix_seed(iter_seed, TAG_BACKWARD), t as u64);

        type TopicOut = (f64, bool, Vec<u32>, Vec<(u32, u32, u32)>, Vec<u64>);
        let per_topic: Vec<TopicOut> = (0..k)
            .into_par_iter()
            .map(|kk| -> Result<TopicOut> {
                let mut rng = stream_rng(seed, kk as u64);
                let weights: Vec<f64> = (0..k_prev).map(|j| b[j][kk]).collect();
                let mass: f64 = weights.iter().sum();
                let mut y_w = vec![0u32; v];
                let mut split = Vec::new();
                let mut agg = vec![0u64; k_prev];
                if !(mass > 0.0) {
                    return Ok((0.0, true, y_w, split, agg));
                }
                let counts = |w: usize| -> u64 {
                    assign.word_topic[kk][w] as u64 + z_in.map_or(0, |z| z[kk][w] as u64)
                };
                let total: u64 = (0..v).map(counts).sum();
                let shape = if total > 0 { total as f64 } else { EMPTY_TOPIC_SHAPE };
                let xi = distrib::beta(shape, mass, &mut rng)?;
                let mut share = vec![0.0; k_prev];
                let mut parts = vec![0u64; k_prev];
                for w in 0..v {
                    let m = counts(w);
                    if m == 0 {
                        continue;
                    }
                    for j in 0..k_prev {
                        share[j] = weights[j] * prev.phi[j][w];
                    }
                    let psi_w: f64 = share.iter().sum();
                    let y = distrib::crt(m, psi_w.max(GAMMA_FLOOR), &mut rng)?;
                    y_w[w] = y as u32;
                    if y == 0 {
                        continue;
                    }
                    if !(psi_w > 0.0) {
                        share.copy_from_slice(&weights);
                    }
                    distrib::multinomial_weights(y, &share, &mut parts, &mut rng)?;
                    for (j, &n) in parts.iter().enumerate() {
                        if n > 0 {
                            split.push((w as u32, j as u32, n as u32));
                            agg[j] += n;
                        }
                    }
                }
                Ok((xi, false, y_w, split, agg))
            })
            .collect::<Result<_>>()?;

        let mut f = TransitionFilter {
            xi: Vec::with_capacity(k),
            fallback: Vec::with_capacity(k),
            y_wk: Vec::with_capacity(k),
            y_split: Vec::with_capacity(k),
            z: vec![vec![0u32; v]; k_prev],
            y_agg: Vec::with_capacity(k),
        };
        for (xi, fb, y_w, split, agg) in per_topic {
            for &(w, j, n) in &split {
                f.z[j as usize][w as usize] += n;
            }
            f.xi.push(xi);
            f.fallback.push(fb);
            f.y_wk.push(y_w);
            f.y_split.push(split);
            f.y_agg.push(agg);
        }
        cache.transitions[t] = Some(f);
    }
    Ok(cache)
}

/// What the forward pass updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Resample `r`, `c_t` and `c0`; off to hold the scales fixed.
    pub update_scales: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { update_scales: true }
    }
}

/// Forward pass from the first slice to the last.
pub fn forward_sample(state: &mut ModelState, cache: &FilterCache, iter_seed: u64) -> Result<()> {
    forward_sample_with(state, cache, iter_seed, ForwardOptions::default())
}

pub fn forward_sample_with(
    state: &mut ModelState,
    cache: &FilterCache,
    iter_seed: u64,
    opts: ForwardOptions,
) -> Result<()> {
    let h = state.hyper.clone();
    let v = state.vocab_size;
    let n_slices = state.num_slices();
    for t in 0..n_slices {
        // topics
        let priors = if t == 0 { None } else { Some(incoming_priors(state, t)) };
        let k = state.slices[t].num_topics();
        let seed = mix_seed(mix_seed(iter_seed, TAG_PHI), t as u64);
        let assign = &state.assignments[t];
        let phi: Vec<Vec<f64>> = (0..k)
            .into_par_iter()
            .map(|kk| -> Result<Vec<f64>> {
                let mut rng = stream_rng(seed, kk as u64);
                let z = cache.z(t, kk);
                let mut conc = vec![0.0; v];
                for w in 0..v {
                    let prior = match &priors {
                        Some((psi, mass)) if mass[kk] > 0.0 => psi[kk][w],
                        _ => h.eta,
                    };
                    conc[w] = prior + assign.word_topic[kk][w] as f64 + z.map_or(0.0, |z| z[w] as f64);
                }
                Ok(distrib::dirichlet(&conc, &mut rng)?)
            })
            .collect::<Result<_>>()?;
        state.slices[t].phi = phi;

        let mut rng = stream_rng(mix_seed(iter_seed, TAG_COUPLING), t as u64);
        if t == 0 {
            if opts.update_scales {
                state.slices[0].c = distrib::gamma(h.e0, 1.0 / h.d0, &mut rng)?;
            }
            continue;
        }
        let f = cache.transitions[t].as_ref().expect("filter ran for every slice t ≥ 1");
        let k_prev = state.slices[t - 1].num_topics();

        // couplings
        let c_t = state.slices[t].c;
        let mask = state.slices[t].dropout_mask.clone();
        let r_prev = state.slices[t - 1].r.clone();
        let b = state.slices[t].coupling.as_mut().expect("coupling");
        for j in 0..k_prev {
            if mask.get(j).copied().unwrap_or(false) {
                continue;
            }
            let r_j = r_prev[j];
            for kk in 0..k {
                if f.fallback[kk] {
                    continue;
                }
                let shape = f.y_agg[kk][j] as f64 + r_j;
                let rate = c_t + f.log_rate(kk);
                b[j][kk] = distrib::gamma(shape, 1.0 / rate, &mut rng)?;
            }
        }
        if !opts.update_scales {
            continue;
        }

        // outgoing shapes of slice t - 1
        let mut rng = stream_rng(mix_seed(iter_seed, TAG_SCALES), t as u64);
        let sum_m: f64 = (0..k).map(|kk| f.log_rate(kk)).sum();
        let c0 = state.c0;
        let p = sum_m / (sum_m + c0);
        let rate = c0 - (1.0 - p).ln();
        let shape0 = h.r0 / k_prev as f64;
        for j in 0..k_prev {
            let y_j: u64 = (0..k).map(|kk| f.y_agg[kk][j]).sum();
            let r_j = state.slices[t - 1].r[j];
            let l = distrib::crt(y_j, r_j, &mut rng)?;
            state.slices[t - 1].r[j] = distrib::gamma(shape0 + l as f64, 1.0 / rate, &mut rng)?;
        }

        // c_t: every β in the transition shares this rate
        let sum_r: f64 = state.slices[t - 1].r.iter().sum();
        let sum_beta: f64 = state.slices[t].coupling.as_ref().unwrap().iter().flatten().sum();
        state.slices[t].c = distrib::gamma(h.e0 + k as f64 * sum_r, 1.0 / (h.d0 + sum_beta), &mut rng)?;
    }

    if opts.update_scales {
        let mut rng = stream_rng(mix_seed(iter_seed, TAG_SCALES), n_slices as u64);
        let last = n_slices - 1;
        let k_last = state.slices[last].num_topics();
        for j in 0..k_last {
            state.slices[last].r[j] = distrib::gamma(h.r0 / k_last as f64, 1.0 / state.c0, &mut rng)?;
        }
        let shape = h.a0 + n_slices as f64 * h.r0;
        let sum_r: f64 = state.slices.iter().flat_map(|s| s.r.iter()).sum();
        state.c0 = distrib::gamma(shape, 1.0 / (h.b0 + sum_r), &mut rng)?;
    }
    Ok(())
}
