//! Synthetic corpora drawn from a known coupled chain, and scoring of how
//! well a fitted model recovers that chain.

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, SlicedCorpus};
use crate::distrib::{self, mix_seed, stream_rng};
use crate::error::{ModelError, Result};
use crate::gibbs::{PosteriorSummary, SliceSummary};
use crate::model::HyperParams;

const TAG_TOPICS: u64 = 0x41;
const TAG_COUPLING: u64 = 0x42;
const TAG_DOCS: u64 = 0x43;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub docs: usize,
    pub vocab: usize,
    pub topics: usize,
    pub slices: usize,
    pub doc_length: usize,
    /// Used for the first slice's topics and, when `couplings` is `None`, the
    /// coupling prior.
    pub hyper: HyperParams,
    /// One `K × K` matrix per transition; drawn from the prior when absent.
    pub couplings: Option<Vec<Vec<Vec<f64>>>>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(docs: usize, vocab: usize, topics: usize, slices: usize, seed: u64) -> Self {
        SynthConfig {
            docs,
            vocab,
            topics,
            slices,
            doc_length: 100,
            hyper: HyperParams::default(),
            couplings: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `Φ*_t`, one `K × V` matrix per slice.
    pub phi: Vec<Vec<Vec<f64>>>,
    /// `B*_{t-1,t}`, one `K × K` matrix per transition.
    pub coupling: Vec<Vec<Vec<f64>>>,
    /// `θ*`, one `D × K` matrix per slice.
    pub theta: Vec<Vec<Vec<f64>>>,
    pub doc_length: usize,
}

impl GroundTruth {
    /// The truth dressed as a posterior summary, for scoring and evaluation.
    pub fn to_summary(&self, corpus: &SlicedCorpus) -> PosteriorSummary {
        let k = self.phi[0].len();
        PosteriorSummary {
            hyper: HyperParams::default(),
            seed: 0,
            vocabulary: corpus.vocabulary.clone(),
            samples: 1,
            slices: self
                .phi
                .iter()
                .enumerate()
                .map(|(t, phi)| SliceSummary {
                    topic_ids: (0..k as u64).map(|i| (t * k) as u64 + i).collect(),
                    presence: vec![1.0; k],
                    phi: phi.clone(),
                    coupling: (t > 0).then(|| self.coupling[t - 1].clone()),
                    doc_ids: corpus.slices[t].iter().map(|d| d.id.clone()).collect(),
                    theta: self.theta[t].clone(),
                })
                .collect(),
            loglik_trace: Vec::new(),
            topic_trace: Vec::new(),
        }
    }
}

pub fn generate(config: &SynthConfig) -> Result<(SlicedCorpus, GroundTruth)> {
    let SynthConfig { docs, vocab, topics: k, slices, doc_length, .. } = *config;
    if docs == 0 || vocab == 0 || k == 0 || slices == 0 || doc_length == 0 {
        return Err(ModelError::Config("docs, vocab, topics, slices and doc_length must be positive".into()));
    }
    let h = &config.hyper;
    h.validate()?;
    let couplings = match &config.couplings {
        Some(b) => {
            if b.len() != slices - 1 || b.iter().any(|m| m.len() != k || m.iter().any(|row| row.len() != k)) {
                return Err(ModelError::Config(format!(
                    "expected {} coupling matrices of size {k}x{k}",
                    slices - 1
                )));
            }
            if b.iter().flatten().flatten().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(ModelError::Config("coupling weights must be finite and non-negative".into()));
            }
            b.clone()
        }
        None => prior_couplings(k, slices, h, config.seed)?,
    };

    let mut rng = stream_rng(mix_seed(config.seed, TAG_TOPICS), 0);
    let mut phi: Vec<Vec<Vec<f64>>> = Vec::with_capacity(slices);
    phi.push(
        (0..k)
            .map(|_| distrib::dirichlet(&vec![h.eta; vocab], &mut rng))
            .collect::<std::result::Result<_, _>>()?,
    );
    for t in 1..slices {
        let prev = &phi[t - 1];
        let mut rows = Vec::with_capacity(k);
        for kk in 0..k {
            let mut conc = vec![0.0; vocab];
            for j in 0..k {
                let b = couplings[t - 1][j][kk];
                conc.iter_mut().zip(&prev[j]).for_each(|(c, &f)| *c += b * f);
            }
            if !conc.iter().any(|&c| c > 0.0) {
                conc = vec![h.eta; vocab];
            }
            rows.push(distrib::dirichlet(&conc, &mut rng)?);
        }
        phi.push(rows);
    }

    let vocabulary: Vec<String> = (0..vocab).map(|w| format!("w{w:05}")).collect();
    let mut corpus_slices = Vec::with_capacity(slices);
    let mut theta = Vec::with_capacity(slices);
    for t in 0..slices {
        let mut rng = stream_rng(mix_seed(config.seed, TAG_DOCS), t as u64);
        let mut docs_t = Vec::with_capacity(docs);
        let mut theta_t = Vec::with_capacity(docs);
        for d in 0..docs {
            let th = distrib::dirichlet(&vec![h.alpha; k], &mut rng)?;
            let mut mix = vec![0.0; vocab];
            for (j, &p) in th.iter().enumerate() {
                mix.iter_mut().zip(&phi[t][j]).for_each(|(m, &f)| *m += p * f);
            }
            let counts = {
                let mut out = vec![0u64; vocab];
                distrib::multinomial_weights(doc_length as u64, &mix, &mut out, &mut rng)?;
                out
            };
            let sparse = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(w, &c)| (w as u32, c as u32))
                .collect();
            docs_t.push(Document::from_counts(format!("s{t}-d{d}"), t as i64, sparse));
            theta_t.push(th);
        }
        corpus_slices.push(docs_t);
        theta.push(theta_t);
    }
    let corpus = SlicedCorpus {
        vocabulary,
        slices: corpus_slices,
        boundaries: (0..=slices).map(|t| t as f64).collect(),
    };
    Ok((
        corpus,
        GroundTruth {
            phi,
            coupling: couplings,
            theta,
            doc_length,
        },
    ))
}

/// A banded coupling pattern: topic `k` inherits mostly from topic `k` and
/// partly from `k + 1` (cyclically); every other link gets `floor`. All
/// entries are multiplied by `strength`.
pub fn banded_couplings(k: usize, slices: usize, strength: f64, side: f64, floor: f64) -> Vec<Vec<Vec<f64>>> {
    let m: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            (0..k)
                .map(|kk| {
                    let w = if j == kk {
                        1.0
                    } else if k > 1 && j == (kk + 1) % k {
                        side
                    } else {
                        floor
                    };
                    strength * w
                })
                .collect()
        })
        .collect();
    vec![m; slices.saturating_sub(1)]
}

/// Couplings drawn from the model's Gamma priors.
fn prior_couplings(k: usize, slices: usize, h: &HyperParams, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut rng = stream_rng(mix_seed(seed, TAG_COUPLING), 0);
    let c0 = distrib::gamma(h.a0, 1.0 / h.b0, &mut rng)?;
    let mut out = Vec::new();
    for _ in 1..slices {
        let c = distrib::gamma(h.e0, 1.0 / h.d0, &mut rng)?;
        let r: Vec<f64> = (0..k)
            .map(|_| distrib::gamma(h.r0 / k as f64, 1.0 / c0, &mut rng))
            .collect::<std::result::Result<_, _>>()?;
        let mut b = vec![vec![0.0; k]; k];
        for (j, row) in b.iter_mut().enumerate() {
            for x in row.iter_mut() {
                *x = distrib::gamma(r[j], 1.0 / c, &mut rng)?;
            }
        }
        out.push(b);
    }
    Ok(out)
}

/// Minimum-cost assignment of rows to columns for an `n × m` matrix with `n ≤ m`.
/// Returns the column of every row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= columns");
    // potentials and matching are 1-based; index 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

fn column_normalize(b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = b.first().map_or(0, Vec::len);
    let sums: Vec<f64> = (0..cols).map(|k| b.iter().map(|row| row[k]).sum()).collect();
    b.iter()
        .map(|row| {
            row.iter()
                .zip(&sums)
                .map(|(&x, &s)| if s > 0.0 { x / s } else { 0.0 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// Per slice, the estimated topic matched to each true topic.
    pub alignment: Vec<Vec<Option<usize>>>,
    /// Pearson correlation of the column-normalized couplings.
    pub correlation: f64,
    /// Pearson correlation of the raw couplings.
    pub raw_correlation: f64,
    /// Mean L1 distance between matching normalized coupling columns.
    pub l1_error: f64,
    /// Per slice, cosine similarity of each true topic with its match.
    pub phi_cosine: Vec<Vec<f64>>,
}

impl RecoveryScore {
    pub fn min_phi_cosine(&self) -> f64 {
        self.phi_cosine.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Aligns estimated topics with the truth slice by slice and compares couplings.
pub fn score_recovery(truth: &GroundTruth, summary: &PosteriorSummary) -> RecoveryScore {
    let mut alignment = Vec::new();
    let mut phi_cosine = Vec::new();
    for (t, true_phi) in truth.phi.iter().enumerate() {
        let est = &summary.slices[t].phi;
        let k = true_phi.len();
        let n = k.max(est.len());
        // pad to square; padded cells cost nothing and mean "unmatched"
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| match (true_phi.get(i), est.get(j)) {
                        (Some(a), Some(b)) => -cosine(a, b),
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        let assign = hungarian(&cost);
        let align: Vec<Option<usize>> = (0..k).map(|i| (assign[i] < est.len()).then_some(assign[i])).collect();
        phi_cosine.push(
            align
                .iter()
                .enumerate()
                .map(|(i, a)| a.map_or(0.0, |j| cosine(&true_phi[i], &est[j])))
                .collect(),
        );
        alignment.push(align);
    }

    let (mut raw_t, mut raw_e, mut norm_t, mut norm_e) = (vec![], vec![], vec![], vec![]);
    let mut l1 = 0.0;
    let mut columns = 0usize;
    for t in 1..truth.phi.len() {
        let tb = &truth.coupling[t - 1];
        let est_b = summary.slices[t].coupling.as_ref();
        let aligned: Vec<Vec<f64>> = (0..tb.len())
            .map(|i| {
                (0..tb[i].len())
                    .map(|k| match (alignment[t - 1][i], alignment[t][k], est_b) {
                        (Some(a), Some(b), Some(m)) => m[a][b],
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        let (nt, ne) = (column_normalize(tb), column_normalize(&aligned));
        for i in 0..tb.len() {
            raw_t.extend_from_slice(&tb[i]);
            raw_e.extend_from_slice(&aligned[i]);
            norm_t.extend_from_slice(&nt[i]);
            norm_e.extend_from_slice(&ne[i]);
        }
        let cols = tb.first().map_or(0, Vec::len);
        for k in 0..cols {
            l1 += (0..tb.len()).map(|i| (nt[i][k] - ne[i][k]).abs()).sum::<f64>();
        }
        columns += cols;
    }
    RecoveryScore {
        alignment,
        correlation: pearson(&norm_t, &norm_e),
        raw_correlation: pearson(&raw_t, &raw_e),
        l1_error: if columns > 0 { l1 / columns as f64 } else { 0.0 },
        phi_cosine,
    }
}
