//! Named parameter registry and its flat binary serialization.
//!
//! Every learnable tensor (and batch-norm running statistic) lives in a
//! `ParamSet` under a unique dotted path such as `enc1.d2.bn.gamma`. Blocks
//! hold names, not tensors, so the registry stays the single source of truth
//! for the optimizer, serialization, and gradient checking.

use std::io::{Read, Write};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::graph::BnStats;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamKind {
    /// Running statistics are carried by the set but never differentiated.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }

    /// Weight decay skips batch-norm gamma/beta.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    items: IndexMap<String, Param>,
}

const MAGIC: &[u8; 4] = b"AGGN";
const VERSION: u32 = 1;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, tensor: Tensor) -> Result<()> {
        if self.items.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name: {name}")));
        }
        self.items.insert(name.to_string(), Param { kind, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.items
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter: {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    /// Replace a parameter's values; the shape must not change.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .items
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter: {name}")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter {name} has shape {}, refusing {}",
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.items.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.items.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.items.values().all(|p| p.tensor.all_finite())
    }

    /// Batch-norm running statistics stored under `{prefix}.running_mean` /
    /// `{prefix}.running_var`.
    pub fn bn_stats(&self, prefix: &str) -> Result<BnStats> {
        Ok(BnStats {
            mean: self.tensor(&format!("{prefix}.running_mean"))?.clone(),
            var: self.tensor(&format!("{prefix}.running_var"))?.clone(),
        })
    }

    pub fn set_bn_stats(&mut self, prefix: &str, stats: &BnStats) -> Result<()> {
        self.set_tensor(&format!("{prefix}.running_mean"), stats.mean.clone())?;
        self.set_tensor(&format!("{prefix}.running_var"), stats.var.clone())
    }

    // ── serialization ───────────────────────────────────────────────
    //
    // Little-endian: magic "AGGN", version u32, count u32, then per
    // parameter: name length u32 + UTF-8 name, rank u32, dims (u32 each),
    // raw f32 values.

    pub fn save(&self, w: &mut dyn Write) -> Result<()> {
        let io_err = |e| Error::io("<params>", e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.items.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for (name, p) in &self.items {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(bytes).map_err(io_err)?;
            let s = p.tensor.shape();
            let dims = [s.n as u32, s.c as u32, s.h as u32, s.w as u32];
            w.write_all(&4u32.to_le_bytes()).map_err(io_err)?;
            for d in dims {
                w.write_all(&d.to_le_bytes()).map_err(io_err)?;
            }
            for &v in p.tensor.data() {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        Ok(())
    }

    /// Load values from the binary format into this set. Every stored entry
    /// must match an existing parameter by name and shape, and every
    /// parameter must be covered.
    pub fn load(&mut self, r: &mut dyn Read) -> Result<()> {
        let mut off = 0usize;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, &mut off)?;
        if &magic != MAGIC {
            return Err(Error::parse("bad parameter file magic", 0));
        }
        let version = read_u32(r, &mut off)?;
        if version != VERSION {
            return Err(Error::parse(format!("unsupported version {version}"), 4));
        }
        let count = read_u32(r, &mut off)? as usize;
        if count != self.items.len() {
            return Err(Error::parse(
                format!(
                    "parameter count mismatch: file has {count}, model expects {}",
                    self.items.len()
                ),
                8,
            ));
        }
        for _ in 0..count {
            let name_len = read_u32(r, &mut off)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes, &mut off)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::parse("parameter name is not UTF-8", off))?;
            let rank = read_u32(r, &mut off)? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::parse(format!("bad rank {rank} for {name}"), off));
            }
            let mut dims = [1usize; 4];
            for d in &mut dims[4 - rank..] {
                *d = read_u32(r, &mut off)? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let mut data = vec![0.0; shape.numel()];
            let mut buf = [0u8; 4];
            for v in &mut data {
                read_exact(r, &mut buf, &mut off)?;
                *v = f32::from_le_bytes(buf) as Real;
            }
            let existing = self.tensor(&name)?.shape();
            if existing != shape {
                return Err(Error::shape(format!(
                    "parameter {name} has shape {existing} in the model but {shape} in the file"
                )));
            }
            self.set_tensor(&name, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }
}

fn read_exact(r: &mut dyn Read, buf: &mut [u8], off: &mut usize) -> Result<()> {
    let pos = *off;
    r.read_exact(buf)
        .map_err(|_| Error::parse("unexpected end of parameter data", pos))?;
    *off += buf.len();
    Ok(())
}

fn read_u32(r: &mut dyn Read, off: &mut usize) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, off)?;
    Ok(u32::from_le_bytes(buf))
}

// ── initialization ──────────────────────────────────────────────────

/// Kaiming-uniform fan-in initialization scaled for a leaky slope.
pub fn kaiming_uniform(shape: Shape, fan_in: usize, slope: f64, rng: &mut Rng) -> Tensor {
    let gain2 = 2.0 / (1.0 + slope * slope);
    let bound = (3.0 * gain2 / fan_in as f64).sqrt();
    Tensor::uniform(shape, rng, -bound, bound)
}

/// Uniform +-1/sqrt(fan_in), used by the fully-connected attention layers.
pub fn fc_uniform(shape: Shape, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, rng, -bound, bound)
}
