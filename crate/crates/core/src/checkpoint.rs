//! Binary checkpoints (`RCTM1` header, little-endian scalars) and the
//! human-readable `state.json` summary.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ModelError, Result};
use crate::model::{HyperParams, Mode, ModelState, SliceAssignments, SliceState};

const MAGIC: &[u8; 4] = b"RCTM";
const VERSION: u8 = b'1';

fn mode_code(m: Mode) -> u8 {
    match m {
        Mode::Rctm => 0,
        Mode::RctmD => 1,
        Mode::RctmF => 2,
    }
}

fn mode_from(code: u8) -> Result<Mode> {
    match code {
        0 => Ok(Mode::Rctm),
        1 => Ok(Mode::RctmD),
        2 => Ok(Mode::RctmF),
        c => Err(ModelError::Checkpoint(format!("unknown mode code {c}"))),
    }
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, x: u8) -> io::Result<()> {
        self.0.write_u8(x)
    }
    fn u32(&mut self, x: u32) -> io::Result<()> {
        self.0.write_u32::<LE>(x)
    }
    fn u64(&mut self, x: u64) -> io::Result<()> {
        self.0.write_u64::<LE>(x)
    }
    fn len(&mut self, x: usize) -> io::Result<()> {
        self.u64(x as u64)
    }
    fn f64(&mut self, x: f64) -> io::Result<()> {
        self.0.write_f64::<LE>(x)
    }
    fn f64s(&mut self, xs: &[f64]) -> io::Result<()> {
        self.len(xs.len())?;
        xs.iter().try_for_each(|&x| self.f64(x))
    }
    fn u32s(&mut self, xs: &[u32]) -> io::Result<()> {
        self.len(xs.len())?;
        xs.iter().try_for_each(|&x| self.u32(x))
    }
    fn str(&mut self, s: &str) -> io::Result<()> {
        self.len(s.len())?;
        self.0.write_all(s.as_bytes())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> io::Result<u8> {
        self.0.read_u8()
    }
    fn u32(&mut self) -> io::Result<u32> {
        self.0.read_u32::<LE>()
    }
    fn u64(&mut self) -> io::Result<u64> {
        self.0.read_u64::<LE>()
    }
    fn len(&mut self) -> io::Result<usize> {
        let n = self.u64()?;
        // a corrupt length must not trigger a huge allocation
        if n > (1 << 40) {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "implausible length"));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> io::Result<f64> {
        self.0.read_f64::<LE>()
    }
    fn f64s(&mut self) -> io::Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn u32s(&mut self) -> io::Result<Vec<u32>> {
        let n = self.len()?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn str(&mut self) -> io::Result<String> {
        let n = self.len()?;
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

fn write_hyper<W: Write>(w: &mut Writer<W>, h: &HyperParams) -> io::Result<()> {
    for x in [h.eta0, h.alpha, h.eta, h.a0, h.b0, h.e0, h.d0, h.r0, h.rho] {
        w.f64(x)?;
    }
    w.u8(mode_code(h.mode))?;
    w.len(h.k_fixed)?;
    w.len(h.k_init)
}

fn read_hyper<R: Read>(r: &mut Reader<R>) -> Result<HyperParams> {
    let mut v = [0.0; 9];
    for x in v.iter_mut() {
        *x = r.f64()?;
    }
    Ok(HyperParams {
        eta0: v[0],
        alpha: v[1],
        eta: v[2],
        a0: v[3],
        b0: v[4],
        e0: v[5],
        d0: v[6],
        r0: v[7],
        rho: v[8],
        mode: mode_from(r.u8()?)?,
        k_fixed: r.len()?,
        k_init: r.len()?,
    })
}

/// Serializes the state into any writer.
pub fn write_state<W: Write>(state: &ModelState, out: W) -> Result<()> {
    let mut w = Writer(out);
    w.0.write_all(MAGIC)?;
    w.u8(VERSION)?;
    w.u64(state.seed)?;
    write_hyper(&mut w, &state.hyper)?;
    w.len(state.vocab_size)?;
    w.f64(state.c0)?;
    w.len(state.iteration)?;
    w.u64(state.next_topic_id)?;
    w.0.write_all(&state.rng.get_seed())?;
    w.u64(state.rng.get_stream())?;
    let pos = state.rng.get_word_pos();
    w.u64(pos as u64)?;
    w.u64((pos >> 64) as u64)?;

    w.len(state.slices.len())?;
    for (s, a) in state.slices.iter().zip(&state.assignments) {
        let k = s.num_topics();
        w.len(k)?;
        for (&id, &born) in s.topic_ids.iter().zip(&s.born_at) {
            w.u64(id)?;
            w.len(born)?;
        }
        for row in &s.phi {
            w.f64s(row)?;
        }
        w.f64s(&s.r)?;
        w.f64(s.c)?;
        match &s.coupling {
            None => w.u8(0)?,
            Some(b) => {
                w.u8(1)?;
                w.len(b.len())?;
                for row in b {
                    w.f64s(row)?;
                }
            }
        }
        w.len(s.dropout_mask.len())?;
        for &m in &s.dropout_mask {
            w.u8(m as u8)?;
        }
        w.len(a.num_docs())?;
        for d in 0..a.num_docs() {
            w.str(&a.doc_ids[d])?;
            w.u64(a.timestamps[d] as u64)?;
            w.len(a.entries[d].len())?;
            for &(word, count) in &a.entries[d] {
                w.u32(word)?;
                w.u32(count)?;
            }
            w.u32s(&a.x[d])?;
            for &on in &s.affinity[d] {
                w.u8(on as u8)?;
            }
            for &p in &s.theta[d] {
                w.f64(p)?;
            }
        }
    }
    w.0.write_all(b"END.")?;
    w.0.flush()?;
    Ok(())
}

/// Deserializes a state written by [`write_state`].
pub fn read_state<R: Read>(input: R) -> Result<ModelState> {
    let mut r = Reader(input);
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut magic = [0u8; 4];
    r.0.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not an rctm checkpoint"));
    }
    let version = r.u8().map_err(|_| bad("truncated header"))?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version `{}`",
            version as char
        )));
    }
    let mut body = || -> Result<ModelState> {
        let seed = r.u64()?;
        let hyper = read_hyper(&mut r)?;
        let vocab_size = r.len()?;
        let c0 = r.f64()?;
        let iteration = r.len()?;
        let next_topic_id = r.u64()?;
        let mut rng_seed = [0u8; 32];
        r.0.read_exact(&mut rng_seed)?;
        let stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        rng.set_stream(stream);
        rng.set_word_pos(lo | (hi << 64));

        let n_slices = r.len()?;
        let mut slices = Vec::with_capacity(n_slices);
        let mut assignments = Vec::with_capacity(n_slices);
        for _ in 0..n_slices {
            let k = r.len()?;
            let mut topic_ids = Vec::with_capacity(k);
            let mut born_at = Vec::with_capacity(k);
            for _ in 0..k {
                topic_ids.push(r.u64()?);
                born_at.push(r.len()?);
            }
            let phi = (0..k).map(|_| r.f64s()).collect::<io::Result<Vec<_>>>()?;
            let rr = r.f64s()?;
            let c = r.f64()?;
            let coupling = match r.u8()? {
                0 => None,
                1 => {
                    let rows = r.len()?;
                    Some((0..rows).map(|_| r.f64s()).collect::<io::Result<Vec<_>>>()?)
                }
                _ => return Err(bad("bad coupling tag")),
            };
            let mask_len = r.len()?;
            let dropout_mask = (0..mask_len)
                .map(|_| r.u8().map(|b| b != 0))
                .collect::<io::Result<Vec<_>>>()?;
            let n_docs = r.len()?;
            let mut a = SliceAssignments {
                doc_ids: Vec::with_capacity(n_docs),
                timestamps: Vec::with_capacity(n_docs),
                entries: Vec::with_capacity(n_docs),
                x: Vec::with_capacity(n_docs),
                doc_topic: Vec::new(),
                word_topic: Vec::new(),
                topic_total: Vec::new(),
            };
            let mut affinity = Vec::with_capacity(n_docs);
            let mut theta = Vec::with_capacity(n_docs);
            for _ in 0..n_docs {
                a.doc_ids.push(r.str()?);
                a.timestamps.push(r.u64()? as i64);
                let n = r.len()?;
                let entries = (0..n)
                    .map(|_| Ok((r.u32()?, r.u32()?)))
                    .collect::<io::Result<Vec<_>>>()?;
                a.entries.push(entries);
                a.x.push(r.u32s()?);
                affinity.push((0..k).map(|_| r.u8().map(|b| b != 0)).collect::<io::Result<Vec<_>>>()?);
                theta.push((0..k).map(|_| r.f64()).collect::<io::Result<Vec<_>>>()?);
            }
            for (d, row) in a.x.iter().enumerate() {
                if row.len() != a.entries[d].len() * k {
                    return Err(bad("assignment block has wrong shape"));
                }
            }
            if a.entries.iter().flatten().any(|&(w, _)| w as usize >= vocab_size) {
                return Err(bad("word index outside vocabulary"));
            }
            a.rebuild_marginals(k, vocab_size);
            slices.push(SliceState {
                topic_ids,
                born_at,
                phi,
                affinity,
                theta,
                r: rr,
                c,
                coupling,
                dropout_mask,
            });
            assignments.push(a);
        }
        let mut end = [0u8; 4];
        r.0.read_exact(&mut end)?;
        if &end != b"END." {
            return Err(bad("missing end marker"));
        }
        let mut rest = Vec::new();
        r.0.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after end marker"));
        }
        Ok(ModelState {
            hyper,
            seed,
            vocab_size,
            c0,
            slices,
            assignments,
            iteration,
            next_topic_id,
            rng,
        })
    };
    let state = body().map_err(|e| match e {
        ModelError::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => bad("truncated checkpoint"),
        other => other,
    })?;
    state
        .validate()
        .map_err(|e| ModelError::Checkpoint(format!("inconsistent state: {e}")))?;
    Ok(state)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_state(state, f)
}

pub fn load(path: &Path) -> Result<ModelState> {
    let f = BufReader::new(File::open(path)?);
    read_state(f)
}

#[derive(Debug, Serialize)]
pub struct StateSummary {
    pub iteration: usize,
    pub seed: u64,
    pub mode: &'static str,
    pub topics_per_slice: Vec<usize>,
    pub c: Vec<f64>,
    pub c0: f64,
}

impl StateSummary {
    pub fn of(state: &ModelState) -> Self {
        StateSummary {
            iteration: state.iteration,
            seed: state.seed,
            mode: state.hyper.mode.as_str(),
            topics_per_slice: state.topic_counts(),
            c: state.slices.iter().map(|s| s.c).collect(),
            c0: state.c0,
        }
    }
}

/// Writes `state.json` next to a checkpoint.
pub fn write_state_json(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&StateSummary::of(state))?)?;
    Ok(())
}
