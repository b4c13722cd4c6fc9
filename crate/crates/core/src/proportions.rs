//! Sparse topic proportions: IBP affinities, Dirichlet proportions, token
//! assignments, and topic birth/death.

use rayon::prelude::*;

use crate::chain::FilterCache;
use crate::distrib::{self, ln_beta, mix_seed, stream_rng, Rng};
use crate::error::Result;
use crate::model::{HyperParams, ModelState, SliceAssignments, SliceState};

const TAG_AFFINITY: u64 = 0x11;
const TAG_DOCS: u64 = 0x12;
const TAG_BIRTH: u64 = 0x13;

/// Probability that a document with no tokens on topic `k` keeps the topic active.
///
/// `zeros_row` counts the other inactive topics of the document, `zeros_col`
/// the other documents of the slice without the topic. Evaluated in log space
/// and clamped to `[0, 1]`.
pub fn affinity_probability(
    zeros_row: usize,
    zeros_col: usize,
    n_docs: usize,
    alpha: f64,
    eta0: f64,
) -> f64 {
    let popularity = zeros_col as f64 + eta0;
    if popularity <= 0.0 {
        return 0.0;
    }
    let zr = zeros_row as f64;
    let ln_ratio = if zeros_row == 0 {
        // B(z(1 + a), a) / B(z a, a) -> a / (1 + a) as z -> 0
        (alpha / (1.0 + alpha)).ln()
    } else {
        ln_beta(alpha * zr + zr, alpha) - ln_beta(alpha * zr, alpha)
    };
    let ln_p = ln_ratio + popularity.ln() - (n_docs as f64 - zeros_col as f64 + eta0).ln();
    ln_p.exp().clamp(0.0, 1.0)
}

/// Draws one affinity indicator given the rest of the slice's affinity matrix.
pub fn sample_affinity(
    d: usize,
    k: usize,
    slice: &SliceState,
    assign: &SliceAssignments,
    hyper: &HyperParams,
    rng: &mut Rng,
) -> Result<bool> {
    if assign.doc_topic[d][k] > 0 {
        return Ok(true);
    }
    let zeros_row = (0..slice.num_topics())
        .filter(|&j| j != k && !slice.affinity[d][j])
        .count();
    let zeros_col = (0..assign.num_docs())
        .filter(|&e| e != d && !slice.affinity[e][k])
        .count();
    let p = affinity_probability(zeros_row, zeros_col, assign.num_docs(), hyper.alpha, hyper.eta0);
    Ok(distrib::bernoulli(p, rng)?)
}

/// Resamples the affinity matrix of one slice in row-major order.
///
/// A row that would end up empty gets its most probable topic forced on.
pub fn sweep_affinity(slice: &mut SliceState, assign: &SliceAssignments, hyper: &HyperParams, rng: &mut Rng) -> Result<()> {
    let n_docs = assign.num_docs();
    let k = slice.num_topics();
    let mut col_zeros: Vec<usize> = (0..k)
        .map(|j| (0..n_docs).filter(|&d| !slice.affinity[d][j]).count())
        .collect();
    let mut probs = vec![0.0; k];
    for d in 0..n_docs {
        let mut row_zeros = slice.affinity[d].iter().filter(|&&on| !on).count();
        for j in 0..k {
            let was_off = !slice.affinity[d][j];
            let on = if assign.doc_topic[d][j] > 0 {
                probs[j] = 1.0;
                true
            } else {
                let zr = row_zeros - was_off as usize;
                let zc = col_zeros[j] - was_off as usize;
                probs[j] = affinity_probability(zr, zc, n_docs, hyper.alpha, hyper.eta0);
                distrib::bernoulli(probs[j], rng)?
            };
            if on == was_off {
                // state flipped
                if on {
                    row_zeros -= 1;
                    col_zeros[j] -= 1;
                } else {
                    row_zeros += 1;
                    col_zeros[j] += 1;
                }
            }
            slice.affinity[d][j] = on;
        }
        if row_zeros == k {
            let best = (0..k)
                .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
                .expect("k ≥ 1");
            slice.affinity[d][best] = true;
            col_zeros[best] -= 1;
        }
    }
    Ok(())
}

/// `θ_d ~ Dir(θ̄_d ⊙ (α + x_{d·k}))`.
pub fn sample_theta(affinity: &[bool], doc_topic: &[u32], alpha: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let conc: Vec<f64> = affinity
        .iter()
        .zip(doc_topic)
        .map(|(&on, &n)| if on { alpha + n as f64 } else { 0.0 })
        .collect();
    Ok(distrib::dirichlet(&conc, rng)?)
}

/// Redistributes every word count of a document over topics with weights
/// `θ_dk φ_kw`. Returns the new `entries × K` block.
pub fn sample_assignments(
    entries: &[(u32, u32)],
    theta: &[f64],
    phi: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    let k = theta.len();
    let mut out = Vec::with_capacity(entries.len() * k);
    let mut weights = vec![0.0; k];
    let mut counts = vec![0u64; k];
    for &(w, c) in entries {
        for j in 0..k {
            weights[j] = theta[j] * phi[j][w as usize];
        }
        if !(weights.iter().sum::<f64>() > 0.0) {
            // underflow: fall back to the proportions alone
            weights.copy_from_slice(theta);
        }
        distrib::multinomial_weights(c as u64, &weights, &mut counts, rng)?;
        out.extend(counts.iter().map(|&n| n as u32));
    }
    Ok(out)
}

/// One proportions sweep over slice `t`: affinities, then proportions and
/// assignments per document. Documents run in parallel on their own streams.
pub fn sweep_slice(state: &mut ModelState, t: usize, iter_seed: u64) -> Result<()> {
    let hyper = state.hyper.clone();
    let slice_seed = mix_seed(iter_seed, t as u64);
    {
        let (slice, assign) = (&mut state.slices[t], &state.assignments[t]);
        let mut rng = stream_rng(mix_seed(slice_seed, TAG_AFFINITY), 0);
        sweep_affinity(slice, assign, &hyper, &mut rng)?;
    }

    let doc_seed = mix_seed(slice_seed, TAG_DOCS);
    let slice = &state.slices[t];
    let assign = &state.assignments[t];
    let updates: Vec<(Vec<f64>, Vec<u32>)> = (0..assign.num_docs())
        .into_par_iter()
        .map(|d| -> Result<_> {
            let mut rng = stream_rng(doc_seed, d as u64);
            let theta = sample_theta(&slice.affinity[d], &assign.doc_topic[d], hyper.alpha, &mut rng)?;
            let x = sample_assignments(&assign.entries[d], &theta, &slice.phi, &mut rng)?;
            Ok((theta, x))
        })
        .collect::<Result<_>>()?;

    let k = state.slices[t].num_topics();
    let assign = &mut state.assignments[t];
    for (d, (theta, x)) in updates.into_iter().enumerate() {
        for (i, &(w, _)) in assign.entries[d].iter().enumerate() {
            for j in 0..k {
                let old = assign.x[d][i * k + j];
                let new = x[i * k + j];
                if old != new {
                    assign.doc_topic[d][j] = assign.doc_topic[d][j] - old + new;
                    assign.word_topic[j][w as usize] = assign.word_topic[j][w as usize] - old + new;
                    assign.topic_total[j] = assign.topic_total[j] - old as u64 + new as u64;
                }
            }
        }
        assign.x[d] = x;
        state.slices[t].theta[d] = theta;
    }
    Ok(())
}

/// Proposes new topics for slice `t`: each document tries `Pois(η0 / |d_t|)`
/// dishes drawn from the prior. The proposing document switches the new topic on.
/// Returns the number of births.
pub fn birth(state: &mut ModelState, t: usize, iter_seed: u64) -> Result<usize> {
    if !state.hyper.mode.is_nonparametric() || state.hyper.eta0 <= 0.0 {
        return Ok(0);
    }
    let mut rng = stream_rng(mix_seed(mix_seed(iter_seed, t as u64), TAG_BIRTH), 0);
    let n_docs = state.assignments[t].num_docs();
    let rate = state.hyper.eta0 / n_docs as f64;
    let mut born = 0;
    for d in 0..n_docs {
        let j = distrib::poisson(rate, &mut rng)?;
        for _ in 0..j {
            let k = new_topic_from_prior(state, t, &mut rng)?;
            state.slices[t].affinity[d][k] = true;
            born += 1;
        }
    }
    Ok(born)
}

/// Adds one topic to slice `t` with every attached variable drawn from its prior.
pub(crate) fn new_topic_from_prior(state: &mut ModelState, t: usize, rng: &mut Rng) -> Result<usize> {
    let h = state.hyper.clone();
    let v = state.vocab_size;
    let (phi, incoming) = if t == 0 {
        (distrib::dirichlet(&vec![h.eta; v], rng)?, None)
    } else {
        let prev = &state.slices[t - 1];
        let c = state.slices[t].c;
        let col = prev
            .r
            .iter()
            .map(|&r| distrib::gamma(r, 1.0 / c, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut psi = vec![0.0; v];
        for (beta, row) in col.iter().zip(&prev.phi) {
            for (p, &f) in psi.iter_mut().zip(row) {
                *p += beta * f;
            }
        }
        let phi = if psi.iter().any(|&p| p > 0.0) {
            distrib::dirichlet(&psi, rng)?
        } else {
            distrib::dirichlet(&vec![h.eta; v], rng)?
        };
        (phi, Some(col))
    };
    let k_next = state.slices[t].num_topics() + 1;
    let r = distrib::gamma(h.r0 / k_next as f64, 1.0 / state.c0, rng)?;
    let outgoing = match state.slices.get(t + 1) {
        Some(next) => Some(
            (0..next.num_topics())
                .map(|_| distrib::gamma(r, 1.0 / next.c, rng))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    Ok(state.push_topic(t, phi, r, incoming, outgoing))
}

/// Removes topics that hold no tokens and pass no latent counts to the next
/// slice. Topics born in the current iteration are spared so they get one
/// sweep to attract data. Each slice keeps at least one topic.
/// Returns the number of topics removed.
pub fn prune(state: &mut ModelState, cache: &FilterCache) -> usize {
    if !state.hyper.mode.is_nonparametric() {
        return 0;
    }
    let mut removed = 0;
    for t in 0..state.num_slices() {
        let k = state.slices[t].num_topics();
        let mut keep: Vec<bool> = (0..k)
            .map(|j| {
                state.assignments[t].topic_total[j] > 0
                    || cache.successor_mass(t, j) > 0
                    || state.slices[t].born_at[j] >= state.iteration
            })
            .collect();
        if !keep.iter().any(|&x| x) {
            keep[0] = true;
        }
        let dropped = keep.iter().filter(|&&x| !x).count();
        if dropped > 0 {
            state.retain_topics(t, &keep);
            removed += dropped;
        }
    }
    removed
}
