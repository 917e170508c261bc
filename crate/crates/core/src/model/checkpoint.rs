//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "ZLSSCKPT"
//! version      u32      1
//! in_channels  u32
//! window       u32
//! activation   u32      1 = tanh between layers
//! layers       u32      L
//! shapes       L x (out u32, in u32)
//! params       per layer: weights (out*in f64), bias (out f64)
//! has_state    u8       0 or 1
//! state        base_lr f64, momentum f64, weight_decay f64, power f64,
//!              max_iter u64, iter u64, velocity laid out like params
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::backbone::{BackboneParams, Dense, Gradients};
use crate::model::optim::{OptimizerState, SgdConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ZLSSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const ACTIVATION_TANH: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: BackboneParams,
    pub state: Option<OptimizerState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_layers(out: &mut Vec<u8>, layers: &[Dense]) {
    for l in layers {
        put_f64s(out, &l.weights);
        put_f64s(out, &l.bias);
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(64 + 16 * p.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, p.in_channels() as u32);
        put_u32(&mut out, p.window() as u32);
        put_u32(&mut out, ACTIVATION_TANH);
        put_u32(&mut out, p.layers().len() as u32);
        for l in p.layers() {
            put_u32(&mut out, l.out_dim as u32);
            put_u32(&mut out, l.in_dim as u32);
        }
        put_layers(&mut out, p.layers());
        match &self.state {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                let c = &s.config;
                put_f64s(&mut out, &[c.base_lr, c.momentum, c.weight_decay, c.power]);
                out.extend_from_slice(&c.max_iter.to_le_bytes());
                out.extend_from_slice(&s.iter.to_le_bytes());
                put_layers(&mut out, &s.velocity.layers);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.error("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(&format!("unsupported checkpoint version {version}")));
        }
        let in_channels = r.u32()? as usize;
        let window = r.u32()? as usize;
        if r.u32()? != ACTIVATION_TANH {
            return Err(r.error("unknown activation code"));
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(r.error(&format!("implausible layer count {n_layers}")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            shapes.push((r.u32()? as usize, r.u32()? as usize));
        }
        let layers = r.layers(&shapes)?;
        let params = BackboneParams::new(in_channels, window, layers)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let state = match r.take(1)?[0] {
            0 => None,
            1 => {
                let f = r.f64s(4)?;
                let max_iter = r.u64()?;
                let iter = r.u64()?;
                let velocity = Gradients {
                    layers: r.layers(&shapes)?,
                };
                Some(OptimizerState {
                    config: SgdConfig {
                        base_lr: f[0],
                        momentum: f[1],
                        weight_decay: f[2],
                        power: f[3],
                        max_iter,
                    },
                    velocity,
                    iter,
                })
            }
            other => return Err(r.error(&format!("bad optimizer-state flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after checkpoint"));
        }
        Ok(Self { params, state })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: &str) -> Error {
        Error::format(self.path, format!("{msg} (at byte {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(&format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error("size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn layers(&mut self, shapes: &[(usize, usize)]) -> Result<Vec<Dense>> {
        shapes
            .iter()
            .map(|&(out_dim, in_dim)| {
                Ok(Dense {
                    out_dim,
                    in_dim,
                    weights: self.f64s(out_dim * in_dim)?,
                    bias: self.f64s(out_dim)?,
                })
            })
            .collect()
    }
}

pub fn save_checkpoint(path: &Path, params: &BackboneParams, state: Option<&OptimizerState>) -> Result<()> {
    let ckpt = Checkpoint {
        params: params.clone(),
        state: state.cloned(),
    };
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
