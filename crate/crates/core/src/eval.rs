//! Held-out evaluation: fold-in, per-word perplexity, NPMI coherence and
//! time-stamp prediction.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, SlicedCorpus};
use crate::distrib::{self, mix_seed, stream_rng, Rng};
use crate::error::{ModelError, Result};
use crate::gibbs::PosteriorSummary;

const TAG_FOLD: u64 = 0x51;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Fold-in sweeps; θ is averaged over the second half.
    pub sweeps: usize,
    pub seed: u64,
    /// Words per topic for coherence.
    pub top_k: usize,
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sweeps: 50,
            seed: 0,
            top_k: 10,
            epsilon: 1e-12,
        }
    }
}

/// Generator for held-out document `d` of slice `t`.
pub fn doc_rng(seed: u64, t: usize, d: usize) -> Rng {
    stream_rng(mix_seed(mix_seed(seed, TAG_FOLD), t as u64), d as u64)
}

/// Topic proportions of an unseen document with the topics held fixed.
pub fn fold_in(doc: &Document, phi: &[Vec<f64>], alpha: f64, sweeps: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if doc.is_empty() {
        return Err(ModelError::Config(format!("cannot fold in empty document {}", doc.id)));
    }
    let k = phi.len();
    if k == 0 {
        return Err(ModelError::Invariant("fold-in needs at least one topic".into()));
    }
    let sweeps = sweeps.max(1);
    let keep_from = sweeps / 2;
    let mut theta = vec![1.0 / k as f64; k];
    let mut mean = vec![0.0; k];
    let mut counts = vec![0u64; k];
    let mut split = vec![0u64; k];
    let mut weights = vec![0.0; k];
    for sweep in 0..sweeps {
        counts.iter_mut().for_each(|c| *c = 0);
        for &(w, c) in &doc.counts {
            for j in 0..k {
                weights[j] = theta[j] * phi[j][w as usize];
            }
            if !weights.iter().any(|&x| x > 0.0) {
                weights.copy_from_slice(&theta);
            }
            distrib::multinomial_weights(c as u64, &weights, &mut split, rng)?;
            counts.iter_mut().zip(&split).for_each(|(a, &b)| *a += b);
        }
        let conc: Vec<f64> = counts.iter().map(|&n| alpha + n as f64).collect();
        theta = distrib::dirichlet(&conc, rng)?;
        if sweep >= keep_from {
            mean.iter_mut().zip(&theta).for_each(|(m, &t)| *m += t);
        }
    }
    let n = (sweeps - keep_from) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// `Σ_w x_w ln Σ_k θ_k φ_kw`.
pub fn doc_loglik(doc: &Document, theta: &[f64], phi: &[Vec<f64>]) -> f64 {
    doc.counts
        .iter()
        .map(|&(w, c)| {
            let p: f64 = theta.iter().zip(phi).map(|(&t, row)| t * row[w as usize]).sum();
            c as f64 * p.ln()
        })
        .sum()
}

fn check_vocab(heldout: &SlicedCorpus, summary: &PosteriorSummary) -> Result<()> {
    if heldout.vocab_size() != summary.vocab_size() {
        return Err(ModelError::Config(format!(
            "held-out vocabulary has {} words, model has {}",
            heldout.vocab_size(),
            summary.vocab_size()
        )));
    }
    Ok(())
}

/// Per-word perplexity of the held-out documents, with each document folded
/// into the topics of its own slice.
pub fn perplexity(heldout: &SlicedCorpus, summary: &PosteriorSummary, config: &EvalConfig) -> Result<f64> {
    check_vocab(heldout, summary)?;
    if heldout.num_slices() != summary.num_slices() {
        return Err(ModelError::Config(format!(
            "held-out corpus has {} slices, model has {}",
            heldout.num_slices(),
            summary.num_slices()
        )));
    }
    let alpha = summary.hyper.alpha;
    let mut total_ll = 0.0;
    let mut total_tokens = 0u64;
    for (t, docs) in heldout.slices.iter().enumerate() {
        let phi = &summary.slices[t].phi;
        let lls: Vec<f64> = docs
            .par_iter()
            .enumerate()
            .map(|(d, doc)| -> Result<f64> {
                let theta = fold_in(doc, phi, alpha, config.sweeps, &mut doc_rng(config.seed, t, d))?;
                Ok(doc_loglik(doc, &theta, phi))
            })
            .collect::<Result<_>>()?;
        total_ll += lls.iter().sum::<f64>();
        total_tokens += docs.iter().map(Document::len).sum::<u64>();
    }
    if total_tokens == 0 {
        return Err(ModelError::Config("held-out corpus has no tokens".into()));
    }
    Ok((-total_ll / total_tokens as f64).exp())
}

/// Document and pair document frequencies for a fixed set of words.
#[derive(Debug, Clone, Default)]
pub struct CoOccurrence {
    pub documents: u64,
    df: HashMap<u32, u64>,
    pair_df: HashMap<(u32, u32), u64>,
}

impl CoOccurrence {
    /// Counts over every document of `reference`, restricted to `words`.
    pub fn from_corpus(reference: &SlicedCorpus, words: &BTreeSet<u32>) -> Self {
        let mut out = CoOccurrence::default();
        for doc in reference.slices.iter().flatten() {
            out.documents += 1;
            let present: Vec<u32> = doc.counts.iter().map(|&(w, _)| w).filter(|w| words.contains(w)).collect();
            for (i, &a) in present.iter().enumerate() {
                *out.df.entry(a).or_insert(0) += 1;
                for &b in &present[i + 1..] {
                    *out.pair_df.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
        }
        out
    }

    pub fn df(&self, w: u32) -> u64 {
        self.df.get(&w).copied().unwrap_or(0)
    }

    pub fn pair_df(&self, a: u32, b: u32) -> u64 {
        self.pair_df.get(&(a.min(b), a.max(b))).copied().unwrap_or(0)
    }

    /// NPMI of two words; `None` when either never occurs.
    pub fn npmi(&self, a: u32, b: u32, epsilon: f64) -> Option<f64> {
        let n = self.documents as f64;
        let (da, db) = (self.df(a), self.df(b));
        if da == 0 || db == 0 {
            return None;
        }
        let pa = da as f64 / n;
        let pb = db as f64 / n;
        let pab = self.pair_df(a, b) as f64 / n + epsilon;
        let denom = -pab.ln();
        if denom.abs() < 1e-9 {
            // the pair occurs in every document
            return Some(1.0);
        }
        Some((pab / (pa * pb)).ln() / denom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    /// Score of every topic, per slice.
    pub per_topic: Vec<Vec<f64>>,
    pub average: f64,
    /// Pairs skipped because a word never occurs in the reference.
    pub skipped_pairs: usize,
}

/// Mean pairwise NPMI of each topic's word list.
pub fn coherence_npmi(topics: &[Vec<Vec<usize>>], reference: &SlicedCorpus, epsilon: f64) -> Coherence {
    let words: BTreeSet<u32> = topics.iter().flatten().flatten().map(|&w| w as u32).collect();
    let co = CoOccurrence::from_corpus(reference, &words);
    coherence_with(topics, &co, epsilon)
}

pub fn coherence_with(topics: &[Vec<Vec<usize>>], co: &CoOccurrence, epsilon: f64) -> Coherence {
    let mut skipped = 0;
    let per_topic: Vec<Vec<f64>> = topics
        .iter()
        .map(|slice| {
            slice
                .iter()
                .map(|list| {
                    let (mut sum, mut n) = (0.0, 0usize);
                    for i in 0..list.len() {
                        for j in i + 1..list.len() {
                            match co.npmi(list[i] as u32, list[j] as u32, epsilon) {
                                Some(v) => {
                                    sum += v;
                                    n += 1;
                                }
                                None => skipped += 1,
                            }
                        }
                    }
                    if n > 0 {
                        sum / n as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let all: Vec<f64> = per_topic.iter().flatten().copied().collect();
    let average = if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
    Coherence {
        per_topic,
        average,
        skipped_pairs: skipped,
    }
}

/// Slice whose topics explain the document best; ties go to the earliest.
pub fn predict_timestamp(doc: &Document, summary: &PosteriorSummary, config: &EvalConfig, stream: (usize, usize)) -> Result<usize> {
    let alpha = summary.hyper.alpha;
    let mut best = (0, f64::NEG_INFINITY);
    for (t, s) in summary.slices.iter().enumerate() {
        // the same stream for every candidate so identical slices tie exactly
        let mut rng = doc_rng(config.seed, stream.0, stream.1);
        let theta = fold_in(doc, &s.phi, alpha, config.sweeps, &mut rng)?;
        let ll = doc_loglik(doc, &theta, &s.phi);
        if ll > best.1 {
            best = (t, ll);
        }
    }
    Ok(best.0)
}

/// Predicted slice of every held-out document, per slice.
pub fn predict_all(heldout: &SlicedCorpus, summary: &PosteriorSummary, config: &EvalConfig) -> Result<Vec<Vec<usize>>> {
    check_vocab(heldout, summary)?;
    heldout
        .slices
        .iter()
        .enumerate()
        .map(|(t, docs)| {
            docs.par_iter()
                .enumerate()
                .map(|(d, doc)| predict_timestamp(doc, summary, config, (t, d)))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Fraction of held-out documents assigned to their own slice.
pub fn time_accuracy(heldout: &SlicedCorpus, summary: &PosteriorSummary, config: &EvalConfig) -> Result<f64> {
    let preds = predict_all(heldout, summary, config)?;
    let total: usize = preds.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(ModelError::Config("held-out corpus has no documents".into()));
    }
    let hits: usize = preds
        .iter()
        .enumerate()
        .map(|(t, p)| p.iter().filter(|&&x| x == t).count())
        .sum();
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Perplexity,
    Coherence,
    Timestamp,
    All,
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "perplexity" => Ok(Metric::Perplexity),
            "coherence" => Ok(Metric::Coherence),
            "timestamp" => Ok(Metric::Timestamp),
            "all" => Ok(Metric::All),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coherence: Option<Coherence>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_accuracy: Option<f64>,
}

/// Runs the selected metrics. Coherence uses `reference` for co-occurrence.
pub fn evaluate(
    heldout: &SlicedCorpus,
    reference: &SlicedCorpus,
    summary: &PosteriorSummary,
    metric: Metric,
    config: &EvalConfig,
) -> Result<EvalResults> {
    let want = |m: Metric| metric == m || metric == Metric::All;
    Ok(EvalResults {
        perplexity: if want(Metric::Perplexity) { Some(perplexity(heldout, summary, config)?) } else { None },
        coherence: want(Metric::Coherence).then(|| coherence_npmi(&summary.top_words(config.top_k), reference, config.epsilon)),
        time_accuracy: if want(Metric::Timestamp) { Some(time_accuracy(heldout, summary, config)?) } else { None },
    })
}
