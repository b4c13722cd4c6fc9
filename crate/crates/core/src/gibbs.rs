//! The sampler loop and posterior averaging.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::chain;
use crate::checkpoint;
use crate::corpus::SlicedCorpus;
use crate::error::{ModelError, Result};
use crate::model::{self, HyperParams, ModelState};
use crate::proportions;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Run the full state validation every this many iterations; 0 disables.
    /// Debug builds validate after every iteration regardless.
    pub validate_every: usize,
    /// CSV progress log.
    pub trace_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 1000,
            burn_in: 500,
            thin: 2,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            validate_every: 0,
            trace_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(ModelError::Config("max_iterations must be positive".into()));
        }
        if self.burn_in >= self.max_iterations {
            return Err(ModelError::Config(format!(
                "burn_in ({}) must be below max_iterations ({})",
                self.burn_in, self.max_iterations
            )));
        }
        if self.thin == 0 {
            return Err(ModelError::Config("thin must be at least 1".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(ModelError::Config("checkpoint_every needs a checkpoint path".into()));
        }
        Ok(())
    }

    fn retains(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in).is_multiple_of(self.thin)
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iteration: usize,
    pub loglik: f64,
    pub topics: Vec<usize>,
    /// Mean coupling weight per transition.
    pub mean_beta: Vec<f64>,
    pub c: Vec<f64>,
    pub births: usize,
    pub deaths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    /// Persistent identifiers of the retained topics, in row order.
    pub topic_ids: Vec<u64>,
    /// Fraction of retained samples in which each topic was alive.
    pub presence: Vec<f64>,
    /// Mean topic-word matrix, `K × V`.
    pub phi: Vec<Vec<f64>>,
    /// Mean coupling from the previous slice, `K_{t-1} × K_t`.
    pub coupling: Option<Vec<Vec<f64>>>,
    pub doc_ids: Vec<String>,
    /// Mean topic proportions per training document.
    pub theta: Vec<Vec<f64>>,
}

impl SliceSummary {
    pub fn num_topics(&self) -> usize {
        self.phi.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub hyper: HyperParams,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    pub samples: usize,
    pub slices: Vec<SliceSummary>,
    pub loglik_trace: Vec<f64>,
    pub topic_trace: Vec<Vec<usize>>,
}

impl PosteriorSummary {
    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    /// Indices of the `n` most probable words of every topic, per slice.
    pub fn top_words(&self, n: usize) -> Vec<Vec<Vec<usize>>> {
        self.slices
            .iter()
            .map(|s| s.phi.iter().map(|row| top_n(row, n)).collect())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Indices of the `n` largest entries, largest first; ties go to the lower index.
pub fn top_n(row: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Training log-likelihood `Σ x log Σ_k θ φ`.
pub fn loglik(state: &ModelState) -> f64 {
    let mut total = 0.0;
    for (s, a) in state.slices.iter().zip(&state.assignments) {
        for (d, entries) in a.entries.iter().enumerate() {
            let theta = &s.theta[d];
            for &(w, c) in entries {
                let p: f64 = theta
                    .iter()
                    .zip(&s.phi)
                    .map(|(&th, row)| th * row[w as usize])
                    .sum();
                total += c as f64 * p.ln();
            }
        }
    }
    total
}

fn check_finite(state: &ModelState) -> Result<()> {
    let fail = |variable: &str| {
        Err(ModelError::NonFinite {
            iteration: state.iteration,
            variable: variable.to_string(),
        })
    };
    if !state.c0.is_finite() {
        return fail("c0");
    }
    for (t, s) in state.slices.iter().enumerate() {
        if !s.c.is_finite() {
            return fail(&format!("c[{t}]"));
        }
        if s.r.iter().any(|x| !x.is_finite()) {
            return fail(&format!("r[{t}]"));
        }
        if s.phi.iter().flatten().any(|x| !x.is_finite()) {
            return fail(&format!("phi[{t}]"));
        }
        if s.theta.iter().flatten().any(|x| !x.is_finite()) {
            return fail(&format!("theta[{t}]"));
        }
        if let Some(b) = &s.coupling {
            if b.iter().flatten().any(|x| !x.is_finite()) {
                return fail(&format!("coupling[{t}]"));
            }
        }
    }
    Ok(())
}

/// One full iteration: proportions and births per slice, dropout masks,
/// backward filter, forward pass, pruning.
pub fn step(state: &mut ModelState) -> Result<Diagnostics> {
    let iter_seed = state.rng.next_u64();
    let mut births = 0;
    for t in 0..state.num_slices() {
        proportions::sweep_slice(state, t, iter_seed)?;
        births += proportions::birth(state, t, iter_seed)?;
    }
    chain::resample_dropout_masks(state, iter_seed)?;
    let cache = chain::backward_filter(state, iter_seed)?;
    chain::forward_sample(state, &cache, iter_seed)?;
    let deaths = proportions::prune(state, &cache);
    check_finite(state)?;
    state.iteration += 1;
    let ll = loglik(state);
    if !ll.is_finite() {
        return Err(ModelError::NonFinite {
            iteration: state.iteration,
            variable: "loglik".into(),
        });
    }
    Ok(Diagnostics {
        iteration: state.iteration,
        loglik: ll,
        topics: state.topic_counts(),
        mean_beta: state
            .slices
            .iter()
            .skip(1)
            .map(|s| {
                let b = s.coupling.as_ref().expect("coupling");
                let n = b.iter().map(Vec::len).sum::<usize>().max(1);
                b.iter().flatten().sum::<f64>() / n as f64
            })
            .collect(),
        c: state.slices.iter().map(|s| s.c).collect(),
        births,
        deaths,
    })
}

#[derive(Default)]
struct TopicAcc {
    count: usize,
    phi: Vec<f64>,
    theta: Vec<f64>,
}

struct SliceAcc {
    topics: BTreeMap<u64, TopicAcc>,
    /// `(previous id, id) -> (sum, co-presence count)`
    coupling: BTreeMap<(u64, u64), (f64, usize)>,
}

/// Running sums over retained samples, keyed by persistent topic id.
pub struct Accumulator {
    samples: usize,
    slices: Vec<SliceAcc>,
}

impl Accumulator {
    pub fn new(num_slices: usize) -> Self {
        Accumulator {
            samples: 0,
            slices: (0..num_slices)
                .map(|_| SliceAcc {
                    topics: BTreeMap::new(),
                    coupling: BTreeMap::new(),
                })
                .collect(),
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn add(&mut self, state: &ModelState) {
        self.samples += 1;
        for (t, s) in state.slices.iter().enumerate() {
            let acc = &mut self.slices[t];
            let n_docs = s.theta.len();
            for (k, &id) in s.topic_ids.iter().enumerate() {
                let e = acc.topics.entry(id).or_insert_with(|| TopicAcc {
                    count: 0,
                    phi: vec![0.0; s.phi[k].len()],
                    theta: vec![0.0; n_docs],
                });
                e.count += 1;
                e.phi.iter_mut().zip(&s.phi[k]).for_each(|(a, &b)| *a += b);
                e.theta.iter_mut().zip(&s.theta).for_each(|(a, row)| *a += row[k]);
            }
            if let Some(b) = &s.coupling {
                let prev_ids = &state.slices[t - 1].topic_ids;
                for (j, row) in b.iter().enumerate() {
                    for (k, &beta) in row.iter().enumerate() {
                        let e = acc.coupling.entry((prev_ids[j], s.topic_ids[k])).or_insert((0.0, 0));
                        e.0 += beta;
                        e.1 += 1;
                    }
                }
            }
        }
    }

    /// Averages over the retained samples. A topic is reported when it was
    /// alive in at least half of them; a slice where none qualifies keeps its
    /// most frequent topic.
    pub fn finish(&self, state: &ModelState, vocabulary: &[String], diagnostics: &[Diagnostics]) -> PosteriorSummary {
        let n = self.samples.max(1);
        let mut kept_ids: Vec<Vec<u64>> = Vec::new();
        let mut slices = Vec::new();
        for (t, acc) in self.slices.iter().enumerate() {
            let mut ids: Vec<u64> = acc
                .topics
                .iter()
                .filter(|(_, e)| 2 * e.count >= n)
                .map(|(&id, _)| id)
                .collect();
            if ids.is_empty() {
                let best = acc
                    .topics
                    .iter()
                    .max_by(|a, b| a.1.count.cmp(&b.1.count).then(b.0.cmp(a.0)))
                    .map(|(&id, _)| id);
                ids.extend(best);
            }
            let phi: Vec<Vec<f64>> = ids
                .iter()
                .map(|id| {
                    let e = &acc.topics[id];
                    let total: f64 = e.phi.iter().sum();
                    e.phi.iter().map(|x| x / total).collect()
                })
                .collect();
            let presence = ids.iter().map(|id| acc.topics[id].count as f64 / n as f64).collect();
            let n_docs = state.assignments[t].num_docs();
            let theta = (0..n_docs)
                .map(|d| {
                    let row: Vec<f64> = ids.iter().map(|id| acc.topics[id].theta[d]).collect();
                    let total: f64 = row.iter().sum();
                    if total > 0.0 {
                        row.iter().map(|x| x / total).collect()
                    } else {
                        vec![1.0 / ids.len() as f64; ids.len()]
                    }
                })
                .collect();
            let coupling = (t > 0).then(|| {
                kept_ids[t - 1]
                    .iter()
                    .map(|&j| {
                        ids.iter()
                            .map(|&k| match acc.coupling.get(&(j, k)) {
                                Some(&(sum, c)) if c > 0 => sum / c as f64,
                                _ => 0.0,
                            })
                            .collect()
                    })
                    .collect()
            });
            slices.push(SliceSummary {
                topic_ids: ids.clone(),
                presence,
                phi,
                coupling,
                doc_ids: state.assignments[t].doc_ids.clone(),
                theta,
            });
            kept_ids.push(ids);
        }
        PosteriorSummary {
            hyper: state.hyper.clone(),
            seed: state.seed,
            vocabulary: vocabulary.to_vec(),
            samples: self.samples,
            slices,
            loglik_trace: diagnostics.iter().map(|d| d.loglik).collect(),
            topic_trace: diagnostics.iter().map(|d| d.topics.clone()).collect(),
        }
    }
}

/// Initializes from the corpus and runs the sampler.
pub fn train(corpus: &SlicedCorpus, hyper: &HyperParams, config: &TrainConfig) -> Result<(ModelState, PosteriorSummary)> {
    config.validate()?;
    let mut state = model::init(corpus, hyper, config.seed)?;
    let summary = run(&mut state, &corpus.vocabulary, config)?;
    Ok((state, summary))
}

/// Continues the chain in `state` until `config.max_iterations` and returns
/// the average over the samples retained along the way.
pub fn run(state: &mut ModelState, vocabulary: &[String], config: &TrainConfig) -> Result<PosteriorSummary> {
    config.validate()?;
    let mut trace = match &config.trace_path {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            let ks: Vec<String> = (1..=state.num_slices()).map(|t| format!("K_{t}")).collect();
            writeln!(f, "iter,loglik,{},elapsed_ms", ks.join(","))?;
            Some(f)
        }
        None => None,
    };
    let start = Instant::now();
    let mut acc = Accumulator::new(state.num_slices());
    let mut diagnostics = Vec::with_capacity(config.max_iterations);
    while state.iteration < config.max_iterations {
        let diag = step(state)?;
        let it = state.iteration;
        if cfg!(debug_assertions) || (config.validate_every > 0 && it.is_multiple_of(config.validate_every)) {
            state.validate()?;
        }
        if let Some(f) = trace.as_mut() {
            let ks: Vec<String> = diag.topics.iter().map(usize::to_string).collect();
            writeln!(f, "{},{},{},{}", it, diag.loglik, ks.join(","), start.elapsed().as_millis())?;
        }
        log::debug!("iteration {it}: loglik {:.3}, topics {:?}", diag.loglik, diag.topics);
        if config.retains(it) {
            acc.add(state);
        }
        if config.checkpoint_every > 0 && it.is_multiple_of(config.checkpoint_every) {
            if let Some(p) = &config.checkpoint_path {
                checkpoint::save(state, p)?;
            }
        }
        diagnostics.push(diag);
    }
    if let Some(mut f) = trace {
        f.flush()?;
    }
    if acc.samples() == 0 {
        acc.add(state);
    }
    Ok(acc.finish(state, vocabulary, &diagnostics))
}
