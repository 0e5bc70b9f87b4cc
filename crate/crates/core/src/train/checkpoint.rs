//! Binary checkpoint format.
//!
//! An 8-byte magic `HGLS0001` followed by sections, each a 4-byte tag, a
//! little-endian `u64` payload length and the payload:
//!
//! - `CONF`: the run configuration as `key = value` text,
//! - `PARM`: named tensors (path, dtype, shape, little-endian payload),
//! - `ADAM`: optimizer hyperparameters, update count and both moments,
//! - `STEP`: the step counter,
//! - `RNG `: seed, stream and word position of the training generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;

use super::{Adam, AdamConfig, TrainState};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{DType, Float, Tensor};
use crate::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGLS0001";

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: String,
    pub state: TrainState<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Float>(out: &mut Vec<u8>, path: &str, t: &Tensor<T>) {
    put_u32(out, path.len() as u32);
    out.extend_from_slice(path.as_bytes());
    out.push(match T::DTYPE {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &x in t.data() {
        x.to_le_bytes_vec(out);
    }
}

fn put_map<'a, T: Float>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (&'a String, &'a Tensor<T>)>) {
    put_u32(out, entries.len() as u32);
    for (p, t) in entries {
        put_tensor(out, p, t);
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

pub fn encode_checkpoint<T: Float>(config: &str, state: &TrainState<T>) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    section(&mut out, b"CONF", config.as_bytes());

    let mut p = Vec::new();
    put_map(&mut p, state.params.iter());
    section(&mut out, b"PARM", &p);

    let mut a = Vec::new();
    for x in [state.adam.cfg.beta1, state.adam.cfg.beta2, state.adam.cfg.eps] {
        a.extend_from_slice(&x.to_le_bytes());
    }
    put_u64(&mut a, state.adam.t);
    put_map(&mut a, state.adam.m.iter());
    put_map(&mut a, state.adam.v.iter());
    section(&mut out, b"ADAM", &a);

    section(&mut out, b"STEP", &state.step.to_le_bytes());

    let mut r = state.rng.get_seed().to_vec();
    put_u64(&mut r, state.rng.get_stream());
    r.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    section(&mut out, b"RNG ", &r);
    out
}

/// Writes atomically: a temporary sibling file is renamed into place, so an
/// interrupted save never clobbers the previous checkpoint.
pub fn save_checkpoint<T: Float>(path: impl AsRef<Path>, config: &str, state: &TrainState<T>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(config, state)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn tensor<T: Float>(&mut self) -> Result<(String, Tensor<T>)> {
        let n = self.u32()? as usize;
        let path = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter path is not UTF-8".into()))?;
        let dtype = self.take(1)?[0];
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            0 => self.take(count * 4)?.chunks_exact(4).map(|c| T::of_f64(f32::from_le_slice(c) as f64)).collect(),
            1 => self.take(count * 8)?.chunks_exact(8).map(|c| T::of_f64(f64::from_le_slice(c))).collect(),
            other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for `{path}`"))),
        };
        Ok((path, Tensor::new(&shape, data)?))
    }

    fn map<T: Float>(&mut self) -> Result<BTreeMap<String, Tensor<T>>> {
        let n = self.u32()?;
        (0..n).map(|_| self.tensor()).collect()
    }
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpointHeader);
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let mut sections: BTreeMap<[u8; 4], &[u8]> = BTreeMap::new();
    while !r.done() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()? as usize;
        sections.insert(tag, r.take(len)?);
    }
    let get = |tag: &[u8; 4]| {
        sections.get(tag).copied().ok_or_else(|| {
            Error::Checkpoint(format!("missing section `{}`", String::from_utf8_lossy(tag)))
        })
    };
    let config = String::from_utf8(get(b"CONF")?.to_vec())
        .map_err(|_| Error::Checkpoint("configuration is not UTF-8".into()))?;

    let mut p = Reader { buf: get(b"PARM")?, pos: 0 };
    let mut params = Params::new();
    for (path, t) in p.map::<T>()? {
        params.insert(path, t)?;
    }

    let mut a = Reader { buf: get(b"ADAM")?, pos: 0 };
    let cfg = AdamConfig {
        beta1: a.f64()?,
        beta2: a.f64()?,
        eps: a.f64()?,
    };
    let t = a.u64()?;
    let m = a.map()?;
    let v = a.map()?;
    let adam = Adam { cfg, t, m, v };

    let step = u64::from_le_bytes(
        get(b"STEP")?
            .try_into()
            .map_err(|_| Error::Checkpoint("step section must be 8 bytes".into()))?,
    );

    let mut rr = Reader { buf: get(b"RNG ")?, pos: 0 };
    let seed: [u8; 32] = rr.take(32)?.try_into().expect("32 bytes");
    let stream = rr.u64()?;
    let word_pos = u128::from_le_bytes(rr.take(16)?.try_into().expect("16 bytes"));
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        config,
        state: TrainState {
            params,
            adam,
            step,
            rng,
        },
    })
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
