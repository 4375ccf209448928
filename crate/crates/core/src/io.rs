//! Checkpoint container, JSON helpers and config hashing.
//!
//! Checkpoint layout (little-endian): magic `TPSCKPT1`, mode tag byte, flag
//! byte (bit 0 equivariant, bit 1 optimizer state present), `u32` layer
//! count, `u64` layer sizes, `f64` parameters in `Mlp::flatten` order, `w`,
//! then optionally the two Adam states (`lr, β₁, β₂, ε`, `u64 t`, `m`, `v`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dynamics::Path as TrajPath;
use crate::error::{CoreError, Result};
use crate::nn::Mlp;
use crate::optim::Adam;
use crate::policy::{Mode, PolicyParams};

const CKPT_MAGIC: &[u8; 8] = b"TPSCKPT1";
const ENSEMBLE_MAGIC: &[u8; 8] = b"TPSPATHS";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    /// Adam states for `θ` and `w`.
    pub optimizer: Option<(Adam, Adam)>,
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CoreError::format(path, e.to_string()))
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_adam(w: &mut impl Write, a: &Adam) -> std::io::Result<()> {
    put_f64s(w, &[a.lr, a.beta1, a.beta2, a.eps])?;
    w.write_all(&a.t.to_le_bytes())?;
    put_f64s(w, &a.m)?;
    put_f64s(w, &a.v)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let p = &ckpt.params;
    let flags = u8::from(p.equivariant) | (u8::from(ckpt.optimizer.is_some()) << 1);
    let body = (|| -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&[p.mode.tag(), flags])?;
        w.write_all(&(p.net.layers() as u32).to_le_bytes())?;
        for s in &p.net.sizes {
            w.write_all(&(*s as u64).to_le_bytes())?;
        }
        put_f64s(&mut w, &p.net.flatten())?;
        put_f64s(&mut w, &[p.w])?;
        if let Some((a, b)) = &ckpt.optimizer {
            put_adam(&mut w, a)?;
            put_adam(&mut w, b)?;
        }
        w.flush()
    })();
    body.map_err(|e| CoreError::io(path, e))
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Option<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).ok()?;
        Some(b)
    }

    fn u64(&mut self) -> Option<u64> {
        self.bytes::<8>().map(u64::from_le_bytes)
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        (0..n).map(|_| self.bytes::<8>().map(f64::from_le_bytes)).collect()
    }

    fn adam(&mut self, n: usize) -> Option<Adam> {
        let h = self.f64s(4)?;
        let t = self.u64()?;
        Some(Adam {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
            t,
            m: self.f64s(n)?,
            v: self.f64s(n)?,
        })
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = Reader { r: BufReader::new(f) };
    let bad = |m: &str| CoreError::format(path, m);
    if &r.bytes::<8>().ok_or_else(|| bad("truncated header"))? != CKPT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let [tag, flags] = r.bytes::<2>().ok_or_else(|| bad("truncated header"))?;
    let mode = Mode::from_tag(tag).ok_or_else(|| bad("unknown mode tag"))?;
    let layers = u32::from_le_bytes(r.bytes::<4>().ok_or_else(|| bad("truncated header"))?) as usize;
    if layers == 0 || layers > 64 {
        return Err(bad("implausible layer count"));
    }
    let mut sizes = Vec::with_capacity(layers + 1);
    for _ in 0..=layers {
        let s = r.u64().ok_or_else(|| bad("truncated header"))?;
        if s == 0 || s > 1 << 20 {
            return Err(bad("implausible layer size"));
        }
        sizes.push(s as usize);
    }
    let mut net = Mlp {
        weights: sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
        biases: sizes[1..].iter().map(|&s| vec![0.0; s]).collect(),
        sizes,
    };
    let n = net.n_params();
    net.set_flat(&r.f64s(n).ok_or_else(|| bad("truncated parameters"))?);
    let w = r.f64s(1).ok_or_else(|| bad("truncated parameters"))?[0];
    let optimizer = if flags & 2 != 0 {
        let a = r.adam(n).ok_or_else(|| bad("truncated optimizer state"))?;
        let b = r.adam(1).ok_or_else(|| bad("truncated optimizer state"))?;
        Some((a, b))
    } else {
        None
    };
    if r.bytes::<1>().is_some() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        params: PolicyParams {
            mode,
            net,
            w,
            equivariant: flags & 1 != 0,
        },
        optimizer,
    })
}

/// Write an ensemble: magic `TPSPATHS`, `u64` count, then each path's binary form.
pub fn write_paths(path: &Path, paths: &[TrajPath]) -> Result<()> {
    let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let body = (|| -> std::io::Result<()> {
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&(paths.len() as u64).to_le_bytes())?;
        for p in paths {
            p.write_binary(&mut w)?;
        }
        w.flush()
    })();
    body.map_err(|e| CoreError::io(path, e))
}

pub fn read_paths(path: &Path) -> Result<Vec<TrajPath>> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = Reader { r: BufReader::new(f) };
    if r.bytes::<8>().as_ref() != Some(ENSEMBLE_MAGIC) {
        return Err(CoreError::format(path, "not a path ensemble (bad magic)"));
    }
    let n = r.u64().ok_or_else(|| CoreError::format(path, "truncated header"))?;
    let mut out = Vec::new();
    for _ in 0..n {
        out.push(TrajPath::read_binary(&mut r.r).map_err(|e| CoreError::format(path, e.to_string()))?);
    }
    if r.bytes::<1>().is_some() {
        return Err(CoreError::format(path, "trailing bytes"));
    }
    Ok(out)
}
