//! Latent state of the coupled topic chain: hyperparameters, per-slice topics,
//! couplings, proportions and token assignments.

use serde::{Deserialize, Serialize};

use crate::corpus::SlicedCorpus;
use crate::distrib::{self, stream_rng, Rng};
use crate::error::{ModelError, Result};

/// Inference variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Nonparametric topic counts, full coupling.
    Rctm,
    /// Nonparametric, couplings dropped out at random each iteration.
    RctmD,
    /// Fixed topic count, no births or deaths.
    RctmF,
}

impl Mode {
    pub fn is_nonparametric(self) -> bool {
        !matches!(self, Mode::RctmF)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rctm => "rctm",
            Mode::RctmD => "rctm-d",
            Mode::RctmF => "rctm-f",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "rctm" => Ok(Mode::Rctm),
            "rctm-d" => Ok(Mode::RctmD),
            "rctm-f" => Ok(Mode::RctmF),
            other => Err(format!("unknown mode `{other}` (expected rctm, rctm-d or rctm-f)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// IBP mass.
    pub eta0: f64,
    /// Dirichlet weight on active topic proportions.
    pub alpha: f64,
    /// Symmetric Dirichlet smoothing of first-slice topics.
    pub eta: f64,
    pub a0: f64,
    pub b0: f64,
    pub e0: f64,
    pub d0: f64,
    pub r0: f64,
    /// Dropout probability (only read in `RctmD`).
    pub rho: f64,
    pub mode: Mode,
    /// Topic count for `RctmF`.
    pub k_fixed: usize,
    /// Initial topic count per slice for the nonparametric modes.
    pub k_init: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            eta0: 0.1,
            alpha: 0.1,
            eta: 0.1,
            a0: 1.0,
            b0: 1.0,
            e0: 1.0,
            d0: 10.0,
            r0: 1.0,
            rho: 0.2,
            mode: Mode::Rctm,
            k_fixed: 20,
            k_init: 20,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("eta", self.eta),
            ("a0", self.a0),
            ("b0", self.b0),
            ("e0", self.e0),
            ("d0", self.d0),
            ("r0", self.r0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::Hyper(format!("{name} must be positive, got {v}")));
            }
        }
        // eta0 = 0 is allowed and simply disables births
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return Err(ModelError::Hyper(format!("eta0 must be non-negative, got {}", self.eta0)));
        }
        if self.mode == Mode::RctmD && !(0.0..=1.0).contains(&self.rho) {
            return Err(ModelError::Hyper(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.initial_topics() == 0 {
            return Err(ModelError::Hyper("topic count must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Topic count used at initialization.
    pub fn initial_topics(&self) -> usize {
        match self.mode {
            Mode::RctmF => self.k_fixed,
            _ => self.k_init,
        }
    }
}

/// Latent variables attached to one time slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceState {
    /// Stable identity of each topic across births and deaths.
    pub topic_ids: Vec<u64>,
    /// Iteration in which each topic was created.
    pub born_at: Vec<usize>,
    /// Topic-word distributions, `K × V`.
    pub phi: Vec<Vec<f64>>,
    /// Sparse document-topic affinity, `D × K`.
    pub affinity: Vec<Vec<bool>>,
    /// Document-topic proportions, `D × K`.
    pub theta: Vec<Vec<f64>>,
    /// Gamma shapes of the outgoing couplings of each topic.
    pub r: Vec<f64>,
    pub c: f64,
    /// Couplings from the previous slice, `K_{t-1} × K_t`. `None` on the first slice.
    pub coupling: Option<Vec<Vec<f64>>>,
    /// Dropout indicators over the previous slice's topics (empty unless `RctmD`).
    pub dropout_mask: Vec<bool>,
}

impl SliceState {
    pub fn num_topics(&self) -> usize {
        self.phi.len()
    }
}

/// Token-topic counts of one slice with cached marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAssignments {
    pub doc_ids: Vec<String>,
    pub timestamps: Vec<i64>,
    /// Observed `(word, count)` entries per document.
    pub entries: Vec<Vec<(u32, u32)>>,
    /// Per document, `entries.len() × K` row-major counts `x_{dwk}`.
    pub x: Vec<Vec<u32>>,
    /// `x_{d·k}`, `D × K`.
    pub doc_topic: Vec<Vec<u32>>,
    /// `x_{·wk}`, topic-major `K × V`.
    pub word_topic: Vec<Vec<u32>>,
    /// `x_{··k}`.
    pub topic_total: Vec<u64>,
}

impl SliceAssignments {
    pub fn num_docs(&self) -> usize {
        self.entries.len()
    }

    pub fn num_topics(&self) -> usize {
        self.topic_total.len()
    }

    /// Recomputes all marginals from `x`.
    pub fn rebuild_marginals(&mut self, k: usize, v: usize) {
        self.doc_topic = vec![vec![0; k]; self.entries.len()];
        self.word_topic = vec![vec![0; v]; k];
        self.topic_total = vec![0; k];
        for (d, entries) in self.entries.iter().enumerate() {
            for (i, &(w, _)) in entries.iter().enumerate() {
                for kk in 0..k {
                    let n = self.x[d][i * k + kk];
                    self.doc_topic[d][kk] += n;
                    self.word_topic[kk][w as usize] += n;
                    self.topic_total[kk] += n as u64;
                }
            }
        }
    }

    /// Appends an empty topic column.
    pub(crate) fn push_topic(&mut self, v: usize) {
        let k = self.num_topics();
        for (d, entries) in self.entries.iter().enumerate() {
            let old = &self.x[d];
            let mut next = Vec::with_capacity(entries.len() * (k + 1));
            for i in 0..entries.len() {
                next.extend_from_slice(&old[i * k..(i + 1) * k]);
                next.push(0);
            }
            self.x[d] = next;
            self.doc_topic[d].push(0);
        }
        self.word_topic.push(vec![0; v]);
        self.topic_total.push(0);
    }

    /// Keeps only the topics flagged in `keep`.
    pub(crate) fn retain_topics(&mut self, keep: &[bool]) {
        let k = self.num_topics();
        for (d, entries) in self.entries.iter().enumerate() {
            let old = &self.x[d];
            let mut next = Vec::new();
            for i in 0..entries.len() {
                for kk in 0..k {
                    if keep[kk] {
                        next.push(old[i * k + kk]);
                    }
                }
            }
            self.x[d] = next;
            self.doc_topic[d] = retain(&self.doc_topic[d], keep);
        }
        self.word_topic = retain(&self.word_topic, keep);
        self.topic_total = retain(&self.topic_total, keep);
    }
}

pub(crate) fn retain<T: Clone>(v: &[T], keep: &[bool]) -> Vec<T> {
    v.iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(x, _)| x.clone())
        .collect()
}

/// The full sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub hyper: HyperParams,
    pub seed: u64,
    pub vocab_size: usize,
    pub c0: f64,
    pub slices: Vec<SliceState>,
    pub assignments: Vec<SliceAssignments>,
    /// Completed Gibbs iterations.
    pub iteration: usize,
    pub next_topic_id: u64,
    pub rng: Rng,
}

impl ModelState {
    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn topic_counts(&self) -> Vec<usize> {
        self.slices.iter().map(SliceState::num_topics).collect()
    }

    pub fn total_tokens(&self) -> u64 {
        self.assignments
            .iter()
            .flat_map(|a| a.entries.iter().flatten())
            .map(|&(_, c)| c as u64)
            .sum()
    }

    pub(crate) fn fresh_topic_id(&mut self) -> u64 {
        let id = self.next_topic_id;
        self.next_topic_id += 1;
        id
    }

    /// Appends a topic to slice `t`. `incoming` holds one coupling per topic of
    /// slice `t - 1`; `outgoing` one per topic of slice `t + 1`. Returns its index.
    pub(crate) fn push_topic(
        &mut self,
        t: usize,
        phi: Vec<f64>,
        r: f64,
        incoming: Option<Vec<f64>>,
        outgoing: Option<Vec<f64>>,
    ) -> usize {
        let id = self.fresh_topic_id();
        let iteration = self.iteration;
        let v = self.vocab_size;
        let s = &mut self.slices[t];
        s.topic_ids.push(id);
        s.born_at.push(iteration);
        s.phi.push(phi);
        s.r.push(r);
        s.affinity.iter_mut().for_each(|row| row.push(false));
        s.theta.iter_mut().for_each(|row| row.push(0.0));
        if let (Some(b), Some(col)) = (s.coupling.as_mut(), incoming) {
            assert_eq!(b.len(), col.len());
            b.iter_mut().zip(col).for_each(|(row, x)| row.push(x));
        }
        if let Some(next) = self.slices.get_mut(t + 1) {
            let row = outgoing.expect("outgoing couplings for an interior slice");
            next.coupling.as_mut().expect("coupling beyond the first slice").push(row);
            if self.hyper.mode == Mode::RctmD {
                next.dropout_mask.push(false);
            }
        }
        self.assignments[t].push_topic(v);
        self.slices[t].num_topics() - 1
    }

    /// Drops the topics of slice `t` whose `keep` flag is false.
    pub(crate) fn retain_topics(&mut self, t: usize, keep: &[bool]) {
        let s = &mut self.slices[t];
        s.topic_ids = retain(&s.topic_ids, keep);
        s.born_at = retain(&s.born_at, keep);
        s.phi = retain(&s.phi, keep);
        s.r = retain(&s.r, keep);
        s.affinity = s.affinity.iter().map(|row| retain(row, keep)).collect();
        s.theta = s
            .theta
            .iter()
            .map(|row| {
                let mut row = retain(row, keep);
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|x| *x /= total);
                }
                row
            })
            .collect();
        if let Some(b) = s.coupling.as_mut() {
            *b = b.iter().map(|row| retain(row, keep)).collect();
        }
        if let Some(next) = self.slices.get_mut(t + 1) {
            if let Some(b) = next.coupling.as_mut() {
                *b = retain(b, keep);
            }
            if !next.dropout_mask.is_empty() {
                next.dropout_mask = retain(&next.dropout_mask, keep);
            }
        }
        self.assignments[t].retain_topics(keep);
    }

    /// Coupling `B_{t-1,t}` with the dropout mask applied.
    pub fn effective_coupling(&self, t: usize) -> Option<Vec<Vec<f64>>> {
        let s = &self.slices[t];
        let b = s.coupling.as_ref()?;
        Some(
            b.iter()
                .enumerate()
                .map(|(j, row)| {
                    if s.dropout_mask.get(j).copied().unwrap_or(false) {
                        vec![0.0; row.len()]
                    } else {
                        row.clone()
                    }
                })
                .collect(),
        )
    }

    /// Checks every structural and numeric invariant of the state.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Invariant(msg));
        if self.slices.len() != self.assignments.len() || self.slices.is_empty() {
            return fail("slice count mismatch".into());
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return fail(format!("c0 = {}", self.c0));
        }
        let v = self.vocab_size;
        for (t, (s, a)) in self.slices.iter().zip(&self.assignments).enumerate() {
            let k = s.num_topics();
            if k == 0 {
                return fail(format!("slice {t} has no topics"));
            }
            if s.topic_ids.len() != k || s.born_at.len() != k || s.r.len() != k {
                return fail(format!("slice {t}: per-topic vector lengths disagree"));
            }
            if a.num_topics() != k || a.word_topic.len() != k {
                return fail(format!("slice {t}: assignment topic count disagrees"));
            }
            if !(s.c > 0.0 && s.c.is_finite()) {
                return fail(format!("slice {t}: c = {}", s.c));
            }
            if s.r.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
                return fail(format!("slice {t}: non-positive r"));
            }
            for (kk, row) in s.phi.iter().enumerate() {
                if row.len() != v {
                    return fail(format!("slice {t} topic {kk}: phi has wrong length"));
                }
                if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                    return fail(format!("slice {t} topic {kk}: invalid phi entry"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return fail(format!("slice {t} topic {kk}: phi sums to {sum}"));
                }
            }
            match (&s.coupling, t) {
                (None, 0) => {}
                (Some(b), t) if t > 0 => {
                    let kp = self.slices[t - 1].num_topics();
                    if b.len() != kp || b.iter().any(|row| row.len() != k) {
                        return fail(format!("slice {t}: coupling is not {kp} × {k}"));
                    }
                    if b.iter().flatten().any(|&x| !(x >= 0.0 && x.is_finite())) {
                        return fail(format!("slice {t}: invalid coupling entry"));
                    }
                    if !s.dropout_mask.is_empty() && s.dropout_mask.len() != kp {
                        return fail(format!("slice {t}: dropout mask length"));
                    }
                }
                _ => return fail(format!("slice {t}: coupling presence")),
            }
            let d = a.num_docs();
            if s.affinity.len() != d || s.theta.len() != d || a.x.len() != d || a.doc_topic.len() != d {
                return fail(format!("slice {t}: document count disagrees"));
            }
            let mut doc_topic = vec![vec![0u32; k]; d];
            let mut word_topic = vec![vec![0u32; v]; k];
            for dd in 0..d {
                let entries = &a.entries[dd];
                if a.x[dd].len() != entries.len() * k {
                    return fail(format!("slice {t} doc {dd}: x has wrong shape"));
                }
                for (i, &(w, c)) in entries.iter().enumerate() {
                    let row = &a.x[dd][i * k..(i + 1) * k];
                    let total: u64 = row.iter().map(|&n| n as u64).sum();
                    if total != c as u64 {
                        return fail(format!(
                            "slice {t} doc {dd} word {w}: assigned {total} of {c} tokens"
                        ));
                    }
                    for kk in 0..k {
                        doc_topic[dd][kk] += row[kk];
                        word_topic[kk][w as usize] += row[kk];
                    }
                }
                let aff = &s.affinity[dd];
                let th = &s.theta[dd];
                if aff.len() != k || th.len() != k {
                    return fail(format!("slice {t} doc {dd}: affinity/theta width"));
                }
                if !aff.iter().any(|&b| b) {
                    return fail(format!("slice {t} doc {dd}: no active topic"));
                }
                for kk in 0..k {
                    if doc_topic[dd][kk] > 0 && !aff[kk] {
                        return fail(format!("slice {t} doc {dd}: tokens on inactive topic {kk}"));
                    }
                    if th[kk] > 0.0 && !aff[kk] {
                        return fail(format!("slice {t} doc {dd}: mass on inactive topic {kk}"));
                    }
                    if !(th[kk] >= 0.0 && th[kk].is_finite()) {
                        return fail(format!("slice {t} doc {dd}: invalid theta"));
                    }
                }
                let sum: f64 = th.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return fail(format!("slice {t} doc {dd}: theta sums to {sum}"));
                }
            }
            if doc_topic != a.doc_topic || word_topic != a.word_topic {
                return fail(format!("slice {t}: cached marginals are stale"));
            }
            let totals: Vec<u64> = word_topic
                .iter()
                .map(|row| row.iter().map(|&n| n as u64).sum())
                .collect();
            if totals != a.topic_total {
                return fail(format!("slice {t}: topic totals are stale"));
            }
        }
        Ok(())
    }
}

/// Builds a random starting state: tokens spread uniformly over the initial
/// topics, topics drawn around those counts, couplings and scales from their priors.
pub fn init(corpus: &SlicedCorpus, hyper: &HyperParams, seed: u64) -> Result<ModelState> {
    hyper.validate()?;
    if corpus.slices.is_empty() {
        return Err(ModelError::Config("corpus has no slices".into()));
    }
    if let Some(t) = corpus.slices.iter().position(Vec::is_empty) {
        return Err(ModelError::EmptySlice(t));
    }
    let v = corpus.vocab_size();
    if v == 0 {
        return Err(ModelError::Config("empty vocabulary".into()));
    }
    let k = hyper.initial_topics();
    let rng = stream_rng(seed, 0);
    let mut init_rng = stream_rng(seed, 1);
    let rng_i = &mut init_rng;

    let c0 = distrib::gamma(hyper.a0, 1.0 / hyper.b0, rng_i)?;
    let mut slices = Vec::with_capacity(corpus.num_slices());
    let mut assignments = Vec::with_capacity(corpus.num_slices());
    let mut next_id = 0u64;
    let uniform = vec![1.0; k];
    let mut buf = vec![0u64; k];

    for (t, docs) in corpus.slices.iter().enumerate() {
        let mut a = SliceAssignments {
            doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
            timestamps: docs.iter().map(|d| d.timestamp).collect(),
            entries: docs.iter().map(|d| d.counts.clone()).collect(),
            x: Vec::with_capacity(docs.len()),
            doc_topic: Vec::new(),
            word_topic: Vec::new(),
            topic_total: Vec::new(),
        };
        for doc in docs {
            let mut row = Vec::with_capacity(doc.counts.len() * k);
            for &(w, c) in &doc.counts {
                if w as usize >= v {
                    return Err(ModelError::Config(format!("word {w} outside vocabulary")));
                }
                distrib::multinomial_weights(c as u64, &uniform, &mut buf, rng_i)?;
                row.extend(buf.iter().map(|&n| n as u32));
            }
            a.x.push(row);
        }
        a.rebuild_marginals(k, v);

        let c = distrib::gamma(hyper.e0, 1.0 / hyper.d0, rng_i)?;
        let r = (0..k)
            .map(|_| distrib::gamma(hyper.r0 / k as f64, 1.0 / c0, rng_i))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let phi = (0..k)
            .map(|kk| {
                let conc: Vec<f64> = a.word_topic[kk].iter().map(|&n| hyper.eta + n as f64).collect();
                distrib::dirichlet(&conc, rng_i)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let affinity: Vec<Vec<bool>> = a
            .doc_topic
            .iter()
            .map(|row| row.iter().map(|&n| n > 0).collect())
            .collect();
        let theta = affinity
            .iter()
            .zip(&a.doc_topic)
            .map(|(act, counts)| {
                let conc: Vec<f64> = act
                    .iter()
                    .zip(counts)
                    .map(|(&on, &n)| if on { hyper.alpha + n as f64 } else { 0.0 })
                    .collect();
                distrib::dirichlet(&conc, rng_i)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let coupling = if t == 0 {
            None
        } else {
            let prev: &SliceState = &slices[t - 1];
            Some(
                prev.r
                    .iter()
                    .map(|&rj| {
                        (0..k)
                            .map(|_| distrib::gamma(rj, 1.0 / c, rng_i))
                            .collect::<std::result::Result<Vec<_>, _>>()
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?,
            )
        };
        let dropout_mask = if t > 0 && hyper.mode == Mode::RctmD {
            vec![false; slices[t - 1].num_topics()]
        } else {
            Vec::new()
        };
        let topic_ids = (next_id..next_id + k as u64).collect();
        next_id += k as u64;
        slices.push(SliceState {
            topic_ids,
            born_at: vec![0; k],
            phi,
            affinity,
            theta,
            r,
            c,
            coupling,
            dropout_mask,
        });
        assignments.push(a);
    }

    let state = ModelState {
        hyper: hyper.clone(),
        seed,
        vocab_size: v,
        c0,
        slices,
        assignments,
        iteration: 0,
        next_topic_id: next_id,
        rng,
    };
    debug_assert!(state.validate().is_ok());
    Ok(state)
}
