//! Indicators, path densities, the discretized log-variance loss with a
//! control variate, the pathwise KL alternative, and the replay buffer.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{base_increment, Path};
use crate::error::{CoreError, Result};
use crate::geometry::{aligned_rmsd, target_frame};
use crate::policy::{bias_batch, bias_vjp, PolicyParams, TAPE_CHUNK};
use crate::systems::{Integrator, SystemSpec};

/// Log-indicator assigned to paths that miss the target under the hard test.
pub const HARD_SENTINEL: f64 = -1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    Hard,
    RbfFinal,
    RbfMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSpec {
    pub kind: IndicatorKind,
    /// Kernel width.
    pub sigma: f64,
}

impl IndicatorSpec {
    pub fn new(kind: IndicatorKind, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(CoreError::Config(format!("indicator sigma must be positive, got {sigma}")));
        }
        Ok(Self { kind, sigma })
    }
}

/// `‖R − ρ·R_B‖` with `ρ` the Kabsch fit in 3D, plain distance otherwise.
pub fn target_distance(sys: &SystemSpec, x: &[f64]) -> f64 {
    if sys.spatial_dim >= 3 {
        aligned_rmsd(x, &sys.r_b, sys.spatial_dim).map_or(f64::INFINITY, |r| r * (sys.n_atoms as f64).sqrt())
    } else {
        x.iter().zip(&sys.r_b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// Log of the Gaussian kernel between `x` and the aligned target.
pub fn log_kernel(sys: &SystemSpec, x: &[f64], sigma: f64) -> f64 {
    -target_distance(sys, x).powi(2) / (2.0 * sigma * sigma)
}

/// Log-indicator of a path and its truncation index.
pub fn indicator(spec: &IndicatorSpec, sys: &SystemSpec, path: &Path) -> (f64, usize) {
    let last = path.steps();
    match spec.kind {
        IndicatorKind::Hard => {
            let v = if sys.in_target(path.final_positions()) { 0.0 } else { HARD_SENTINEL };
            (v, last)
        }
        IndicatorKind::RbfFinal => (log_kernel(sys, path.final_positions(), spec.sigma), last),
        IndicatorKind::RbfMax => {
            let mut best = (f64::NEG_INFINITY, 0);
            for l in 0..=last {
                let v = log_kernel(sys, path.positions(l), spec.sigma);
                if v > best.0 {
                    best = (v, l);
                }
            }
            best
        }
    }
}

/// Fill the cached indicator, truncation and unbiased log-density.
pub fn annotate(spec: &IndicatorSpec, sys: &SystemSpec, path: &mut Path) {
    let (v, l) = indicator(spec, sys, path);
    path.log_indicator = v;
    path.truncation = l;
    path.log_p0 = log_path_density(sys, path, None).unwrap_or(f64::NAN);
}

/// Base-standardized controls `v = b / (m σ_λ)` for `rows` positions,
/// evaluated in parallel chunks.
pub fn controls(params: &PolicyParams, sys: &SystemSpec, xs: &[f64], rows: usize) -> Result<Vec<f64>> {
    let n = sys.dim();
    let sigma = sys.noise_scale(sys.base_temperature);
    let starts: Vec<usize> = (0..rows).step_by(TAPE_CHUNK).collect();
    let parts: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let m = TAPE_CHUNK.min(rows - s);
            bias_batch(params, sys, &xs[s * n..(s + m) * n], m)
        })
        .collect::<Result<_>>()?;
    let mut v: Vec<f64> = parts.into_iter().flatten().collect();
    for (i, x) in v.iter_mut().enumerate() {
        *x /= sys.masses[i % n] * sigma[i % n];
    }
    Ok(v)
}

fn truncated_positions(path: &Path) -> Vec<f64> {
    (0..path.truncation).flat_map(|l| path.positions(l).iter().copied()).collect()
}

/// `Σ_{ℓ<ℓ*} log N(x_{ℓ+1}; x_ℓ + (u + Σv)Δt, ΣΣᵀΔt)` at the base
/// temperature, computed from the states alone. `None` is the zero policy.
pub fn log_path_density(sys: &SystemSpec, path: &Path, policy: Option<&PolicyParams>) -> Result<f64> {
    let n = sys.dim();
    if path.noise_dim != n || path.truncation > path.steps() {
        return Err(CoreError::Invalid("path does not match system".into()));
    }
    let rows = path.truncation;
    let v = match policy {
        Some(p) => controls(p, sys, &truncated_positions(path), rows)?,
        None => vec![0.0; rows * n],
    };
    let sigma = sys.noise_scale(sys.base_temperature);
    let norm: f64 = sigma
        .iter()
        .map(|s| 0.5 * (2.0 * std::f64::consts::PI * s * s * sys.dt).ln())
        .sum();
    let mut grad = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut total = 0.0;
    for l in 0..rows {
        base_increment(sys, path.state(l), path.state(l + 1), &mut grad, &mut z);
        let vl = &v[l * n..(l + 1) * n];
        let sq: f64 = z.iter().zip(vl).map(|(z, v)| (z - v * sys.dt).powi(2)).sum();
        total += -sq / (2.0 * sys.dt) - norm;
    }
    Ok(total)
}

/// Base-standardized increments rebuilt from stored policy values and noises:
/// `z = v̄Δt + κ√Δt ε`, `κ = √(λ_gen / λ)`.
fn stored_increments(sys: &SystemSpec, path: &Path) -> Vec<f64> {
    let n = path.noise_dim;
    let kappa = (path.gen_temperature / sys.base_temperature).sqrt();
    let sq = sys.dt.sqrt();
    (0..path.truncation * n)
        .map(|i| path.policy_values[i] * sys.dt + kappa * sq * path.noises[i])
        .collect()
}

fn log_ratio_terms(sys: &SystemSpec, v: &[f64], z: &[f64]) -> f64 {
    v.iter().zip(z).map(|(v, z)| 0.5 * v * v * sys.dt - v * z).sum()
}

/// `½Σ‖v_θ‖²Δt − Σ v_θ·v̄ Δt − Σ v_θ·√Δt ε + log 1_B` over `ℓ < ℓ*`, built
/// from the stored policy values and noises.
pub fn f_hat(sys: &SystemSpec, path: &Path, params: &PolicyParams) -> Result<f64> {
    if path.noises.len() != path.policy_values.len() || path.states.len() != (path.steps() + 1) * path.state_dim {
        return Err(CoreError::Invalid("path states, noises and values disagree in length".into()));
    }
    let v = controls(params, sys, &truncated_positions(path), path.truncation)?;
    Ok(log_ratio_terms(sys, &v, &stored_increments(sys, path)) + path.log_indicator)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVariate {
    /// Learned scalar `w`.
    #[default]
    Learned,
    /// Batch mean of the log-ratios; `w` is not used.
    Local,
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub loss: f64,
    /// `log-ratio − baseline` per path.
    pub residuals: Vec<f64>,
    pub log_ratios: Vec<f64>,
    pub grad_theta: Vec<f64>,
    pub grad_w: f64,
    pub mean_log_p0: f64,
    pub mean_log_pv: f64,
    pub mean_log_indicator: f64,
    /// Every path carried the hard-miss sentinel.
    pub all_sentinel: bool,
}

/// Mean squared residual of `log(p₀ 1_B / p_θ)` against `w` (or the batch
/// mean), with gradients for `θ` and `w`.
pub fn loss(
    sys: &SystemSpec,
    batch: &[&Path],
    params: &PolicyParams,
    w: f64,
    cv: ControlVariate,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBuffer);
    }
    let n = sys.dim();
    let k = batch.len() as f64;
    let mut offsets = Vec::with_capacity(batch.len() + 1);
    offsets.push(0);
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for p in batch {
        if p.noise_dim != n {
            return Err(CoreError::Invalid("path does not match system".into()));
        }
        xs.extend(truncated_positions(p));
        zs.extend(stored_increments(sys, p));
        offsets.push(offsets.last().unwrap() + p.truncation);
    }
    let rows = *offsets.last().unwrap();
    let v = controls(params, sys, &xs, rows)?;
    let log_ratios: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (a, b) = (offsets[i] * n, offsets[i + 1] * n);
            log_ratio_terms(sys, &v[a..b], &zs[a..b]) + p.log_indicator
        })
        .collect();
    if log_ratios.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "log-ratio".into(),
        });
    }
    let baseline = match cv {
        ControlVariate::Learned => w,
        ControlVariate::Local => log_ratios.iter().sum::<f64>() / k,
    };
    let residuals: Vec<f64> = log_ratios.iter().map(|l| l - baseline).collect();
    let loss = residuals.iter().map(|r| r * r).sum::<f64>() / k;
    let sigma = sys.noise_scale(sys.base_temperature);
    let mut cot = vec![0.0; rows * n];
    for (i, r) in residuals.iter().enumerate() {
        for j in offsets[i] * n..offsets[i + 1] * n {
            let c = j % n;
            cot[j] = 2.0 * r / k * (v[j] * sys.dt - zs[j]) / (sys.masses[c] * sigma[c]);
        }
    }
    let (grad_theta, _) = bias_vjp(params, sys, &xs, rows, &cot, false)?;
    let grad_w = match cv {
        ControlVariate::Learned => -2.0 * residuals.iter().sum::<f64>() / k,
        ControlVariate::Local => 0.0,
    };
    let mean_log_p0 = batch.iter().map(|p| p.log_p0).sum::<f64>() / k;
    let mean_log_indicator = batch.iter().map(|p| p.log_indicator).sum::<f64>() / k;
    let mean_log_pv = batch
        .iter()
        .zip(&log_ratios)
        .map(|(p, l)| p.log_p0 - (l - p.log_indicator))
        .sum::<f64>()
        / k;
    Ok(LossValue {
        loss,
        residuals,
        log_ratios,
        grad_theta,
        grad_w,
        mean_log_p0,
        mean_log_pv,
        mean_log_indicator,
        all_sentinel: batch.iter().all(|p| p.log_indicator <= HARD_SENTINEL),
    })
}

#[derive(Clone, Debug)]
pub struct KlValue {
    /// Batch mean of `½Σ‖v‖²Δt − log 1_B` (the zero-mean noise term dropped).
    pub loss: f64,
    pub grad_theta: Vec<f64>,
}

/// Reverse-KL objective on on-policy paths with its pathwise gradient from a
/// discrete adjoint through the overdamped Euler–Maruyama map.
pub fn kl_loss(sys: &SystemSpec, batch: &[&Path], params: &PolicyParams, spec: &IndicatorSpec) -> Result<KlValue> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBuffer);
    }
    if sys.integrator != Integrator::Overdamped {
        return Err(CoreError::Invalid("the KL objective supports overdamped dynamics only".into()));
    }
    let n = sys.dim();
    let k = batch.len() as f64;
    let sigma = sys.noise_scale(sys.base_temperature);
    let mut value = 0.0;
    // Adjoint state per path, seeded with −∇ log 1̃ at the truncation index.
    let mut adj: Vec<Vec<f64>> = batch
        .iter()
        .map(|p| {
            value -= p.log_indicator;
            let x = p.positions(p.truncation);
            match spec.kind {
                IndicatorKind::Hard => vec![0.0; n],
                _ => {
                    let fr = target_frame(x, &sys.r_b, sys.spatial_dim, true);
                    let t = fr.apply(&sys.r_b);
                    x.iter().zip(&t).map(|(a, b)| (a - b) / (spec.sigma * spec.sigma)).collect()
                }
            }
        })
        .collect();
    let mut grad = vec![0.0; params.net.n_params()];
    let max_l = batch.iter().map(|p| p.truncation).max().unwrap_or(0);
    let mut hv = vec![0.0; n];
    for l in (0..max_l).rev() {
        let active: Vec<usize> = (0..batch.len()).filter(|&i| l < batch[i].truncation).collect();
        let rows = active.len();
        let xs: Vec<f64> = active.iter().flat_map(|&i| batch[i].positions(l).iter().copied()).collect();
        let b = bias_batch(params, sys, &xs, rows)?;
        let mut g = vec![0.0; rows * n];
        for (r, &i) in active.iter().enumerate() {
            for c in 0..n {
                let m = sys.masses[c];
                let bb = b[r * n + c];
                value += 0.5 * (bb / (m * sigma[c])).powi(2) * sys.dt;
                g[r * n + c] = sys.dt * adj[i][c] / m + sys.dt * bb / (m * m * sigma[c] * sigma[c]);
            }
        }
        let (gp, gx) = bias_vjp(params, sys, &xs, rows, &g, true)?;
        let gx = gx.expect("state gradient requested");
        for (a, v) in grad.iter_mut().zip(&gp) {
            *a += v;
        }
        for (r, &i) in active.iter().enumerate() {
            let scaled: Vec<f64> = adj[i].iter().zip(&sys.masses).map(|(a, m)| a / m).collect();
            sys.hessian_vec(&xs[r * n..(r + 1) * n], &scaled, &mut hv);
            for c in 0..n {
                adj[i][c] += -sys.dt * hv[c] + gx[r * n + c];
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= k);
    Ok(KlValue {
        loss: value / k,
        grad_theta: grad,
    })
}

/// FIFO store of paths with uniform sampling without replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    pub capacity: usize,
    paths: VecDeque<Path>,
    pub inserted: u64,
}

#[derive(Serialize, Deserialize)]
struct BufferManifest {
    capacity: usize,
    inserted: u64,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CoreError::Config("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            paths: VecDeque::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Path> {
        self.paths.iter()
    }

    pub fn push(&mut self, paths: impl IntoIterator<Item = Path>) {
        for p in paths {
            if self.paths.len() == self.capacity {
                self.paths.pop_front();
            }
            self.paths.push_back(p);
            self.inserted += 1;
        }
    }

    pub fn clear(&mut self) {
        self.paths.clear();
    }

    /// `k` distinct paths chosen uniformly.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Result<Vec<&Path>> {
        if self.paths.is_empty() {
            return Err(CoreError::EmptyBuffer);
        }
        if k > self.paths.len() {
            return Err(CoreError::Invalid(format!(
                "cannot draw {k} paths from a buffer of {}",
                self.paths.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.paths.len(), k)
            .into_iter()
            .map(|i| &self.paths[i])
            .collect())
    }

    /// Writes `buffer.bin` and `buffer.json` into `dir`.
    pub fn save(&self, dir: &FsPath) -> Result<()> {
        let bin = dir.join("buffer.bin");
        let mut w = BufWriter::new(File::create(&bin).map_err(|e| CoreError::io(&bin, e))?);
        for p in &self.paths {
            p.write_binary(&mut w).map_err(|e| CoreError::io(&bin, e))?;
        }
        w.flush().map_err(|e| CoreError::io(&bin, e))?;
        let manifest = BufferManifest {
            capacity: self.capacity,
            inserted: self.inserted,
            len: self.paths.len(),
        };
        let json = dir.join("buffer.json");
        std::fs::write(&json, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
            .map_err(|e| CoreError::io(&json, e))
    }

    pub fn load(dir: &FsPath) -> Result<Self> {
        let json = dir.join("buffer.json");
        let text = std::fs::read(&json).map_err(|e| CoreError::io(&json, e))?;
        let m: BufferManifest =
            serde_json::from_slice(&text).map_err(|e| CoreError::format(&json, e.to_string()))?;
        let bin = dir.join("buffer.bin");
        let mut r = BufReader::new(File::open(&bin).map_err(|e| CoreError::io(&bin, e))?);
        let mut buf = Self::new(m.capacity)?;
        for _ in 0..m.len {
            let p = Path::read_binary(&mut r).map_err(|e| CoreError::format(&bin, e.to_string()))?;
            buf.paths.push_back(p);
        }
        if buf.paths.len() > buf.capacity {
            return Err(CoreError::format(&bin, "more paths than capacity"));
        }
        buf.inserted = m.inserted;
        Ok(buf)
    }
}
