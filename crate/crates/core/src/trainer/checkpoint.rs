//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "NSRC"  u32 version
//! u64 len  header JSON (canonical; training config and input width)
//! u64 completed iterations
//! [u8; 32] rng seed  u64 rng stream  u128 rng word position
//! u32 groups, each:
//!     u32 len name  u64 rows  u64 cols
//!     f64[rows*cols] value  f64[..] adam m  f64[..] adam v  u64 adam steps
//! u32 buffers, each:
//!     u32 len name  u64 rows  u64 cols  f64[rows*cols] value
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelState, TrainConfig};
use crate::detectors::ScoringHead;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Parameterized};

const MAGIC: &[u8; 4] = b"NSRC";
pub const CHECKPOINT_VERSION: u32 = 1;
const CENTRE_BUFFER: &str = "head.centre";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    input_dim: usize,
    config: TrainConfig,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialises `state` to bytes.
pub fn write_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let header = crate::canonical_json(&Header {
        input_dim: state.input_dim(),
        config: state.config.clone(),
    })?;
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(header.as_bytes());
    put_u64(&mut out, state.iteration);
    out.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut out, state.rng.get_stream());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let groups = state.detector.params();
    put_u32(&mut out, groups.len() as u32);
    for g in groups {
        put_name(&mut out, &g.name);
        put_u64(&mut out, g.value.rows() as u64);
        put_u64(&mut out, g.value.cols() as u64);
        put_matrix(&mut out, &g.value);
        put_matrix(&mut out, &g.adam_m);
        put_matrix(&mut out, &g.adam_v);
        put_u64(&mut out, g.step_count);
    }
    match &state.detector.head {
        ScoringHead::Hypersphere { centre } => {
            put_u32(&mut out, 1);
            put_name(&mut out, CENTRE_BUFFER);
            put_u64(&mut out, centre.rows() as u64);
            put_u64(&mut out, centre.cols() as u64);
            put_matrix(&mut out, centre);
        }
        _ => put_u32(&mut out, 0),
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint("matrix size overflows".into()))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Restores a state written by [`write_checkpoint`].
pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = r.usize()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    let mut state = ModelState::skeleton(&header.config, header.input_dim)?;
    state.iteration = r.u64()?;
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    state.rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    state.rng.set_stream(stream);
    state.rng.set_word_pos(word_pos);

    let count = r.u32()? as usize;
    let mut groups = state.detector.params_mut();
    if count != groups.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameter groups, the configured model has {}",
            groups.len()
        )));
    }
    for group in groups.iter_mut() {
        let name = r.name()?;
        if name != group.name {
            return Err(Error::Checkpoint(format!("expected group {}, found {name}", group.name)));
        }
        let (rows, cols) = (r.usize()?, r.usize()?);
        if (rows, cols) != group.shape() {
            return Err(Error::Checkpoint(format!(
                "group {name} has shape {rows}x{cols}, expected {}x{}",
                group.shape().0,
                group.shape().1
            )));
        }
        group.value = r.matrix(rows, cols)?;
        group.adam_m = r.matrix(rows, cols)?;
        group.adam_v = r.matrix(rows, cols)?;
        group.step_count = r.u64()?;
        group.zero_grad();
    }
    let buffers = r.u32()?;
    for _ in 0..buffers {
        let name = r.name()?;
        let (rows, cols) = (r.usize()?, r.usize()?);
        let value = r.matrix(rows, cols)?;
        match (&mut state.detector.head, name.as_str()) {
            (ScoringHead::Hypersphere { centre }, CENTRE_BUFFER) if centre.shape() == value.shape() => *centre = value,
            _ => return Err(Error::Checkpoint(format!("unexpected buffer {name}"))),
        }
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(state)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?)
        .read_to_end(&mut bytes)
        .map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
            _ => Error::Io(e),
        })?;
    read_checkpoint(&bytes)
}
