//! Binary checkpoint format: model parameters, optimizer state, PRNG state,
//! and the loop clocks needed to resume a run bit-exactly.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "VARLAB01"
//! version    u32      currently 1
//! config     u64 len + UTF-8 canonical RunConfig text
//! tokens     u64      tokens_seen
//! n_params   u32
//! per param: u32 path len + path bytes, u8 dtype (0 = f32, 1 = f64),
//!            u32 rank, rank × u64 dims, raw element data
//! optim      u8 flag; if 1: u64 t, then per-param m data, then v data
//! prng       4 × u64
//! clocks     u64 step, u64 last_rescale_applied, u64 last_log_tokens,
//!            u64 epoch, u64 batch_cursor
//! ```
//!
//! Save → load → save is byte-identical; writes go through a temp file and
//! a rename so a crash never leaves a truncated checkpoint behind.

use std::fs;
use std::path::Path;

use varlab_core::init::record_init_stds;
use varlab_core::model::Model;
use varlab_core::optim::OptimState;
use varlab_core::tensor::{Dtype, Tensor};
use varlab_core::{Error, Prng, Result};

use crate::config::RunConfig;

/// First eight bytes of every checkpoint.
pub const CKPT_MAGIC: &[u8; 8] = b"VARLAB01";
/// Current format version.
pub const CKPT_VERSION: u32 = 1;

/// Training-loop positions that a resumed run must pick up exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResumeClocks {
    pub step: u64,
    pub last_rescale_applied: u64,
    pub last_log_tokens: u64,
    pub epoch: u64,
    pub batch_cursor: u64,
}

/// Everything a checkpoint carries. Training state is f32, matching the
/// training dtype.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tokens_seen: u64,
    pub model: Model<f32>,
    pub optim: Option<OptimState<f32>>,
    pub prng_state: [u64; 4],
    pub clocks: ResumeClocks,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn tensor_data(&mut self, t: &Tensor<f32>) {
        for &x in t.data() {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::invalid(format_args!("checkpoint truncated reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor_data(&mut self, len: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(len * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    /// Serializes to the format above.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        let config_text = self.config.to_text();
        w.u64(config_text.len() as u64);
        w.bytes(config_text.as_bytes());
        w.u64(self.tokens_seen);
        w.u32(self.model.n_params() as u32);
        for i in 0..self.model.n_params() {
            let h = self.model.handle(i);
            w.u32(h.path.len() as u32);
            w.bytes(h.path.as_bytes());
            w.buf.push(dtype_code(Dtype::F32));
            w.u32(h.shape.len() as u32);
            for &d in &h.shape {
                w.u64(d as u64);
            }
            w.tensor_data(self.model.param(i));
        }
        match &self.optim {
            Some(state) => {
                w.buf.push(1);
                w.u64(state.t);
                for t in state.first_moments() {
                    w.tensor_data(t);
                }
                for t in state.second_moments() {
                    w.tensor_data(t);
                }
            }
            None => w.buf.push(0),
        }
        for &s in &self.prng_state {
            w.u64(s);
        }
        w.u64(self.clocks.step);
        w.u64(self.clocks.last_rescale_applied);
        w.u64(self.clocks.last_log_tokens);
        w.u64(self.clocks.epoch);
        w.u64(self.clocks.batch_cursor);
        w.buf
    }

    /// Parses and validates a checkpoint image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != CKPT_MAGIC {
            return Err(Error::invalid("bad checkpoint magic"));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::invalid(format_args!(
                "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
            )));
        }
        let config_len = r.u64("config length")? as usize;
        let config_text = std::str::from_utf8(r.take(config_len, "config")?)
            .map_err(|_| Error::invalid("checkpoint config is not UTF-8"))?;
        let config = RunConfig::from_text(config_text)?;
        config.validate()?;
        let tokens_seen = r.u64("tokens_seen")?;

        let mut model: Model<f32> = Model::new(config.model.clone())?;
        record_init_stds(&mut model, &config.init)?;
        let n_params = r.u32("param count")? as usize;
        if n_params != model.n_params() {
            return Err(Error::invalid(format_args!(
                "checkpoint has {n_params} params, config implies {}",
                model.n_params()
            )));
        }
        for i in 0..model.n_params() {
            let path_len = r.u32("path length")? as usize;
            let path = std::str::from_utf8(r.take(path_len, "path")?)
                .map_err(|_| Error::invalid("checkpoint path is not UTF-8"))?;
            let h = model.handle(i);
            if path != h.path {
                return Err(Error::invalid(format_args!(
                    "checkpoint param order mismatch: got {path}, expected {}",
                    h.path
                )));
            }
            let code = r.u8("dtype")?;
            if code != dtype_code(Dtype::F32) {
                return Err(Error::invalid(format_args!(
                    "{path}: unsupported dtype code {code} (training checkpoints are f32)"
                )));
            }
            let rank = r.u32("rank")? as usize;
            if rank != h.shape.len() {
                return Err(Error::invalid(format_args!("{path}: rank mismatch")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("dim")? as usize);
            }
            if dims != h.shape {
                return Err(Error::invalid(format_args!(
                    "{path}: shape {dims:?} does not match config shape {:?}",
                    h.shape
                )));
            }
            let len = model.param(i).len();
            let data = r.tensor_data(len, path)?;
            model.param_mut(i).data_mut().copy_from_slice(&data);
        }

        let optim = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let t = r.u64("optimizer step")?;
                let mut read_set = |what: &str| -> Result<Vec<Tensor<f32>>> {
                    let mut out = Vec::with_capacity(model.n_params());
                    for i in 0..model.n_params() {
                        let shape = model.handle(i).shape.clone();
                        let data = r.tensor_data(model.param(i).len(), what)?;
                        out.push(Tensor::from_vec(&shape, data)?);
                    }
                    Ok(out)
                };
                let m = read_set("first moments")?;
                let v = read_set("second moments")?;
                Some(OptimState::from_parts(config.optim.clone(), m, v, t, &model)?)
            }
            other => {
                return Err(Error::invalid(format_args!("bad optimizer flag {other}")))
            }
        };

        let mut prng_state = [0u64; 4];
        for s in &mut prng_state {
            *s = r.u64("prng state")?;
        }
        let clocks = ResumeClocks {
            step: r.u64("step")?,
            last_rescale_applied: r.u64("last_rescale_applied")?,
            last_log_tokens: r.u64("last_log_tokens")?,
            epoch: r.u64("epoch")?,
            batch_cursor: r.u64("batch_cursor")?,
        };
        if r.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { config, tokens_seen, model, optim, prng_state, clocks })
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)
            .map_err(|e| Error::invalid(format_args!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, path)
            .map_err(|e| Error::invalid(format_args!("{}: {e}", path.display())))
    }

    /// Reads and parses a checkpoint file.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)
            .map_err(|e| Error::invalid(format_args!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// The restored PRNG, for loops that thread one through.
    pub fn prng(&self) -> Prng {
        Prng::from_state(self.prng_state)
    }
}

fn dtype_code(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    }
}
