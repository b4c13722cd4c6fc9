use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use rctm::corpus::{self, InputFormat, PreprocessConfig, SliceSpec, SlicedCorpus};
use rctm::eval::{self, EvalConfig, Metric};
use rctm::gibbs::{self, PosteriorSummary, TrainConfig};
use rctm::model::{HyperParams, Mode};
use rctm::synth::{self, SynthConfig};
use rctm::{checkpoint, DistribError, ModelError};

use crate::settings::Settings;
use crate::{EvalArgs, ExportArgs, IngestArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const SUMMARY: &str = "summary.json";
pub const STATE: &str = "state.json";
pub const TRACE: &str = "trace.csv";
pub const HELDOUT: &str = "heldout";

/// 3 for numeric failures inside the sampler, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            return if m.is_numeric() { 3 } else { 2 };
        }
        if cause.downcast_ref::<DistribError>().is_some() {
            return 3;
        }
    }
    2
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(dir: &Path) -> Result<SlicedCorpus> {
    corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    if !a.input.is_file() {
        bail!("input file {} does not exist", a.input.display());
    }
    let format = match a.format.as_deref() {
        None => InputFormat::from_path(&a.input),
        Some("jsonl") => InputFormat::Jsonl,
        Some("tsv") => InputFormat::Tsv,
        Some(other) => bail!("unknown format `{other}` (expected jsonl or tsv)"),
    };
    let spec = match (a.slices, a.slice_seconds) {
        (Some(n), None) => SliceSpec::Count(n),
        (None, Some(s)) => SliceSpec::Duration(s),
        _ => bail!("give exactly one of --slices or --slice-seconds"),
    };
    let mut pre = PreprocessConfig::new();
    pre.min_df = a.min_df;
    pre.max_df = a.max_df;
    pre.min_token_len = a.min_token_len;
    if let Some(p) = &a.stopwords {
        pre.load_stopwords(p)?;
    }
    let (corpus, report) = corpus::ingest(&a.input, format, &pre, spec)?;
    corpus::export(&corpus, &a.out)?;
    write_json(&a.out.join("ingest_report.json"), &report)?;
    println!(
        "{} documents, {} slices, vocabulary {}, {} dropped",
        corpus.num_documents(),
        corpus.num_slices(),
        corpus.vocab_size(),
        report.dropped
    );
    if !report.empty_slices.is_empty() {
        log::warn!("empty slices: {:?}", report.empty_slices);
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut config = SynthConfig::new(a.docs, a.vocab, a.topics, a.slices, a.seed);
    config.doc_length = a.doc_length;
    config.couplings = match a.couplings.as_str() {
        "prior" => None,
        "banded" => Some(synth::banded_couplings(a.topics, a.slices, a.coupling_strength, 0.5, 0.02)),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading couplings {path}"))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing couplings {path}"))?)
        }
    };
    let (corpus, truth) = synth::generate(&config)?;
    corpus::export(&corpus, &a.out)?;
    write_json(&a.out.join("truth.json"), &truth)?;
    println!("wrote {} documents over {} slices to {}", corpus.num_documents(), a.slices, a.out.display());
    Ok(())
}

const TRAIN_KEYS: &[&str] = &[
    "mode", "rho", "k_fixed", "k_init", "eta0", "alpha", "eta", "a0", "b0", "e0", "d0", "r0", "iterations",
    "burn_in", "thin", "seed", "split", "checkpoint_every", "validate_every",
];

pub fn resolve_train(a: &TrainArgs) -> Result<(HyperParams, TrainConfig, Option<f64>)> {
    let s = Settings::load(a.config.as_deref())?;
    if let Some(k) = s.unknown_keys(TRAIN_KEYS).into_iter().next() {
        bail!("unknown config key `{k}`");
    }
    let d = HyperParams::default();
    let mode: Mode = s
        .pick(a.mode.clone(), "mode", d.mode.as_str().to_string())?
        .parse()
        .map_err(|e| anyhow!("{e}"))?;
    let hyper = HyperParams {
        eta0: s.pick(a.eta0, "eta0", d.eta0)?,
        alpha: s.pick(a.alpha, "alpha", d.alpha)?,
        eta: s.pick(a.eta, "eta", d.eta)?,
        a0: s.pick(a.a0, "a0", d.a0)?,
        b0: s.pick(a.b0, "b0", d.b0)?,
        e0: s.pick(a.e0, "e0", d.e0)?,
        d0: s.pick(a.d0, "d0", d.d0)?,
        r0: s.pick(a.r0, "r0", d.r0)?,
        rho: s.pick(a.rho, "rho", d.rho)?,
        mode,
        k_fixed: s.pick(a.k_fixed, "k_fixed", d.k_fixed)?,
        k_init: s.pick(a.k_init, "k_init", d.k_init)?,
    };
    hyper.validate()?;
    let dc = TrainConfig::default();
    let max_iterations = s.pick(a.iterations, "iterations", dc.max_iterations)?;
    let config = TrainConfig {
        max_iterations,
        burn_in: s.pick(a.burn_in, "burn_in", dc.burn_in.min(max_iterations / 2))?,
        thin: s.pick(a.thin, "thin", dc.thin)?,
        seed: s.pick(a.seed, "seed", dc.seed)?,
        checkpoint_every: s.pick(a.checkpoint_every, "checkpoint_every", 0)?,
        checkpoint_path: Some(a.out.join(CHECKPOINT)),
        validate_every: s.pick(a.validate_every, "validate_every", 0)?,
        trace_path: Some(a.out.join(TRACE)),
    };
    config.validate()?;
    let split = s.pick_opt(a.split, "split")?;
    Ok((hyper, config, split))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (hyper, config, split) = resolve_train(a)?;
    let full = load_corpus(&a.corpus)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let train_corpus = match split {
        Some(p) => {
            let parts = corpus::split(&full, p, config.seed)?;
            corpus::export(&parts.heldout, &a.out.join(HELDOUT))?;
            if !parts.unsplit_slices.is_empty() {
                log::warn!("slices too small to split: {:?}", parts.unsplit_slices);
            }
            parts.train
        }
        None => full,
    };
    let (state, summary) = gibbs::train(&train_corpus, &hyper, &config)?;
    checkpoint::save(&state, &a.out.join(CHECKPOINT))?;
    checkpoint::write_state_json(&state, &a.out.join(STATE))?;
    write_json(&a.out.join(SUMMARY), &summary)?;
    println!(
        "{} iterations, {} retained samples, topics per slice {:?}",
        state.iteration,
        summary.samples,
        summary.slices.iter().map(|s| s.num_topics()).collect::<Vec<_>>()
    );
    Ok(())
}

fn load_model(dir: &Path) -> Result<PosteriorSummary> {
    let ckpt = dir.join(CHECKPOINT);
    if !ckpt.is_file() {
        bail!("no checkpoint at {}", ckpt.display());
    }
    let path = dir.join(SUMMARY);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(PosteriorSummary::from_json(&text)?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let metric: Metric = a.metric.parse().map_err(|e: String| anyhow!(e))?;
    let summary = load_model(&a.model)?;
    let heldout = match (&a.heldout, a.split, &a.corpus) {
        (Some(dir), _, _) => load_corpus(dir)?,
        (None, Some(p), Some(c)) => corpus::split(&load_corpus(c)?, p, summary.seed)?.heldout,
        _ => {
            let dir: PathBuf = a.model.join(HELDOUT);
            if !dir.is_dir() {
                bail!("no held-out corpus: pass --heldout, or --corpus with --split, or train with --split");
            }
            load_corpus(&dir)?
        }
    };
    let reference = match &a.reference {
        Some(dir) => load_corpus(dir)?,
        None => heldout.clone(),
    };
    let config = EvalConfig {
        sweeps: a.sweeps,
        seed: a.seed,
        top_k: a.top_k,
        epsilon: a.epsilon,
    };
    let results = eval::evaluate(&heldout, &reference, &summary, metric, &config)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(&a.out, &results)?;
    if let Some(c) = &results.coherence {
        let path = a.out.with_extension("coherence.csv");
        let mut f = BufWriter::new(fs::File::create(&path)?);
        writeln!(f, "slice,topic,npmi")?;
        for (t, row) in c.per_topic.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                writeln!(f, "{t},{k},{v}")?;
            }
        }
        f.flush()?;
    }
    if metric == Metric::Timestamp || metric == Metric::All {
        let preds = eval::predict_all(&heldout, &summary, &config)?;
        let path = a.out.with_extension("timestamps.csv");
        let mut f = BufWriter::new(fs::File::create(&path)?);
        writeln!(f, "doc,slice,predicted")?;
        for (t, p) in preds.iter().enumerate() {
            for (d, &s) in p.iter().enumerate() {
                writeln!(f, "{},{t},{s}", heldout.slices[t][d].id)?;
            }
        }
        f.flush()?;
    }
    println!("{}", serde_json::to_string(&results)?);
    Ok(())
}

#[derive(Serialize)]
struct TopicOut {
    id: u64,
    words: Vec<String>,
    weights: Vec<f64>,
}

#[derive(Serialize)]
struct SliceOut {
    slice: usize,
    topics: Vec<TopicOut>,
}

pub fn export(a: &ExportArgs) -> Result<()> {
    if a.top_n == 0 {
        bail!("--top-n must be positive");
    }
    let summary = load_model(&a.model)?;
    let state = checkpoint::load(&a.model.join(CHECKPOINT))?;
    fs::create_dir_all(a.out.join("plotdata"))?;

    let slices: Vec<SliceOut> = summary
        .slices
        .iter()
        .enumerate()
        .map(|(t, s)| SliceOut {
            slice: t,
            topics: s
                .phi
                .iter()
                .zip(&s.topic_ids)
                .map(|(row, &id)| {
                    let top = gibbs::top_n(row, a.top_n);
                    TopicOut {
                        id,
                        words: top.iter().map(|&w| summary.vocabulary[w].clone()).collect(),
                        weights: top.iter().map(|&w| row[w]).collect(),
                    }
                })
                .collect(),
        })
        .collect();
    write_json(&a.out.join("topics.json"), &slices)?;

    // final coupling draw from the checkpoint
    let mut f = BufWriter::new(fs::File::create(a.out.join("couplings.csv"))?);
    writeln!(f, "transition,from,to,from_id,to_id,weight")?;
    for t in 1..state.num_slices() {
        let b = state.slices[t].coupling.as_ref().expect("coupling");
        for (j, row) in b.iter().enumerate() {
            for (k, w) in row.iter().enumerate() {
                let (fi, ti) = (state.slices[t - 1].topic_ids[j], state.slices[t].topic_ids[k]);
                writeln!(f, "{t},{j},{k},{fi},{ti},{w}")?;
            }
        }
    }
    f.flush()?;

    let plot = a.out.join("plotdata");
    for (t, s) in summary.slices.iter().enumerate().skip(1) {
        let mut f = BufWriter::new(fs::File::create(plot.join(format!("coupling_mean_{t}.csv")))?);
        for row in s.coupling.as_ref().expect("coupling") {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(f, "{}", cells.join(","))?;
        }
        f.flush()?;
    }
    let mut f = BufWriter::new(fs::File::create(plot.join("trace.csv"))?);
    let ks: Vec<String> = (1..=summary.num_slices()).map(|t| format!("K_{t}")).collect();
    writeln!(f, "iter,loglik,{}", ks.join(","))?;
    for (i, (ll, k)) in summary.loglik_trace.iter().zip(&summary.topic_trace).enumerate() {
        let ks: Vec<String> = k.iter().map(usize::to_string).collect();
        writeln!(f, "{},{ll},{}", i + 1, ks.join(","))?;
    }
    f.flush()?;
    println!("exported {} slices to {}", summary.num_slices(), a.out.display());
    Ok(())
}
