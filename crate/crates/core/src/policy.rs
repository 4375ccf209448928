//! Bias-force parameterizations F (force), P (potential gradient) and S
//! (positive scaling of the displacement to the aligned target).
//!
//! Network input per atom is its position in the target-aligned frame
//! followed by its distance to the aligned target, so the input has
//! `N·(d+1)` entries. The frame `ρ` is the Kabsch fit of `R_B` onto the
//! current state (identity below three dimensions or when equivariance is
//! off) and is treated as a constant when differentiating.

use std::fmt;
use std::str::FromStr;

use autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{aligned_rmsd, target_frame};
use crate::nn::{flatten_grads, Mlp};
use crate::systems::SystemSpec;

/// Rows per tape when differentiating batched bias evaluations.
pub const TAPE_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    F,
    P,
    S,
}

impl Mode {
    pub fn tag(self) -> u8 {
        match self {
            Mode::F => b'F',
            Mode::P => b'P',
            Mode::S => b'S',
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            b'F' => Some(Mode::F),
            b'P' => Some(Mode::P),
            b'S' => Some(Mode::S),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag() as char)
    }
}

impl FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F" => Ok(Mode::F),
            "P" => Ok(Mode::P),
            "S" => Ok(Mode::S),
            _ => Err(CoreError::Config(format!("unknown mode '{s}' (expected F, P or S)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub mode: Mode,
    pub net: Mlp,
    /// Learned control variate (log-normalizer estimate).
    pub w: f64,
    /// Use the Kabsch frame for inputs and outputs.
    pub equivariant: bool,
}

/// Bias force and standardized control at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub bias: Vec<f64>,
    pub value: Vec<f64>,
}

pub fn feature_dim(sys: &SystemSpec) -> usize {
    sys.n_atoms * (sys.spatial_dim + 1)
}

pub fn output_dim(sys: &SystemSpec, mode: Mode) -> usize {
    match mode {
        Mode::F => sys.dim(),
        Mode::P => 1,
        Mode::S => sys.n_atoms,
    }
}

impl PolicyParams {
    /// Fresh parameters; the F and P output layers start at zero.
    pub fn init(
        sys: &SystemSpec,
        mode: Mode,
        hidden: &[usize],
        equivariant: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut sizes = vec![feature_dim(sys)];
        sizes.extend_from_slice(hidden);
        sizes.push(output_dim(sys, mode));
        Self {
            mode,
            net: Mlp::init(&sizes, rng, mode != Mode::S),
            w: 0.0,
            equivariant,
        }
    }

    pub fn check_system(&self, sys: &SystemSpec) -> Result<()> {
        if self.net.input_dim() != feature_dim(sys) || self.net.output_dim() != output_dim(sys, self.mode) {
            return Err(CoreError::Invalid(format!(
                "policy shape {:?} does not fit system {} in mode {}",
                self.net.sizes, sys.name, self.mode
            )));
        }
        Ok(())
    }
}

/// Per-row alignment data for a batch of states.
pub struct Frames {
    /// Row-major `d × d` rotations per row, or `None` when all are identity.
    pub rotations: Option<Vec<f64>>,
    /// Translation per row, `[rows, d]`.
    pub translations: Vec<f64>,
    /// `ρ·R_B` per row, `[rows, dim]`.
    pub targets: Vec<f64>,
}

pub fn frames(sys: &SystemSpec, xs: &[f64], rows: usize, equivariant: bool) -> Frames {
    let (n, d) = (sys.dim(), sys.spatial_dim);
    if d < 3 || !equivariant {
        let mut targets = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            targets.extend_from_slice(&sys.r_b);
        }
        return Frames {
            rotations: None,
            translations: vec![0.0; rows * d],
            targets,
        };
    }
    let mut rotations = Vec::with_capacity(rows * d * d);
    let mut translations = Vec::with_capacity(rows * d);
    let mut targets = Vec::with_capacity(rows * n);
    for x in xs.chunks_exact(n).take(rows) {
        let t = target_frame(x, &sys.r_b, d, true);
        targets.extend(t.apply(&sys.r_b));
        rotations.extend_from_slice(&t.rotation);
        translations.extend_from_slice(&t.translation);
    }
    Frames {
        rotations: Some(rotations),
        translations,
        targets,
    }
}

/// `Rᵀ v` for a `d`-vector using a row-major rotation.
fn rot_t(r: &[f64], v: &[f64], d: usize, out: &mut [f64]) {
    for k in 0..d {
        out[k] = (0..d).map(|j| r[j * d + k] * v[j]).sum();
    }
}

/// `R v`.
fn rot(r: &[f64], v: &[f64], d: usize, out: &mut [f64]) {
    for k in 0..d {
        out[k] = (0..d).map(|j| r[k * d + j] * v[j]).sum();
    }
}

/// Network inputs for a batch of positions.
pub fn featurize_batch(sys: &SystemSpec, xs: &[f64], rows: usize, fr: &Frames) -> Vec<f64> {
    let (n, d, na) = (sys.dim(), sys.spatial_dim, sys.n_atoms);
    let nf = feature_dim(sys);
    let mut feats = vec![0.0; rows * nf];
    let mut shifted = vec![0.0; d];
    for r in 0..rows {
        let x = &xs[r * n..(r + 1) * n];
        let tgt = &fr.targets[r * n..(r + 1) * n];
        let f = &mut feats[r * nf..(r + 1) * nf];
        for a in 0..na {
            let xa = &x[a * d..(a + 1) * d];
            let out = &mut f[a * (d + 1)..a * (d + 1) + d];
            match &fr.rotations {
                Some(rots) => {
                    for k in 0..d {
                        shifted[k] = xa[k] - fr.translations[r * d + k];
                    }
                    rot_t(&rots[r * d * d..(r + 1) * d * d], &shifted, d, out);
                }
                None => out.copy_from_slice(xa),
            }
            let ta = &tgt[a * d..(a + 1) * d];
            f[a * (d + 1) + d] = xa.iter().zip(ta).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        }
    }
    feats
}

/// Features of a single state.
pub fn featurize(sys: &SystemSpec, x: &[f64], equivariant: bool) -> Result<Vec<f64>> {
    if x.len() != sys.dim() {
        return Err(CoreError::Dimension {
            expected: sys.dim(),
            got: x.len(),
        });
    }
    let fr = frames(sys, x, 1, equivariant);
    Ok(featurize_batch(sys, x, 1, &fr))
}

/// Bias forces for `rows` states (`[rows, dim]`).
pub fn bias_batch(params: &PolicyParams, sys: &SystemSpec, xs: &[f64], rows: usize) -> Result<Vec<f64>> {
    let (n, d, na) = (sys.dim(), sys.spatial_dim, sys.n_atoms);
    let fr = frames(sys, xs, rows, params.equivariant);
    let feats = featurize_batch(sys, xs, rows, &fr);
    let mut b = vec![0.0; rows * n];
    match params.mode {
        Mode::F => {
            let out = params.net.forward(&feats, rows);
            match &fr.rotations {
                Some(rots) => {
                    for r in 0..rows {
                        let rm = &rots[r * d * d..(r + 1) * d * d];
                        for a in 0..na {
                            let s = r * n + a * d;
                            rot(rm, &out[s..s + d], d, &mut b[s..s + d]);
                        }
                    }
                }
                None => b.copy_from_slice(&out),
            }
        }
        Mode::S => {
            let out = params.net.forward(&feats, rows);
            for r in 0..rows {
                for a in 0..na {
                    let s = softplus(out[r * na + a]);
                    for k in 0..d {
                        let i = r * n + a * d + k;
                        b[i] = s * (fr.targets[i] - xs[i]);
                    }
                }
            }
        }
        Mode::P => {
            let nf = feature_dim(sys);
            let (_, gf) = params.net.value_and_input_grad(&feats, rows);
            let mut gx = vec![0.0; d];
            for r in 0..rows {
                for a in 0..na {
                    let base = r * nf + a * (d + 1);
                    let gy = &gf[base..base + d];
                    let gd = gf[base + d];
                    match &fr.rotations {
                        Some(rots) => rot(&rots[r * d * d..(r + 1) * d * d], gy, d, &mut gx),
                        None => gx.copy_from_slice(gy),
                    }
                    let s = r * n + a * d;
                    let dist = feats[base + d];
                    for k in 0..d {
                        let u = if dist > 0.0 {
                            (xs[s + k] - fr.targets[s + k]) / dist
                        } else {
                            0.0
                        };
                        b[s + k] = -(gx[k] + gd * u);
                    }
                }
            }
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "policy output".into(),
        });
    }
    Ok(b)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standardized control `v = Σ⁻¹ b / m` at the base temperature.
pub fn control_from_bias(sys: &SystemSpec, bias: &[f64]) -> Vec<f64> {
    let sigma = sys.noise_scale(sys.base_temperature);
    let n = sys.dim();
    bias.iter()
        .enumerate()
        .map(|(i, b)| b / (sys.masses[i % n] * sigma[i % n]))
        .collect()
}

/// Bias force and control at a single state.
pub fn bias_force(params: &PolicyParams, sys: &SystemSpec, x: &[f64]) -> Result<PolicyOutput> {
    if x.len() != sys.dim() {
        return Err(CoreError::Dimension {
            expected: sys.dim(),
            got: x.len(),
        });
    }
    let bias = bias_batch(params, sys, x, 1)?;
    let value = control_from_bias(sys, &bias);
    Ok(PolicyOutput { bias, value })
}

/// Learned scalar potential `φ(R)` of a P-mode policy.
pub fn potential(params: &PolicyParams, sys: &SystemSpec, x: &[f64]) -> Result<f64> {
    if params.mode != Mode::P {
        return Err(CoreError::Invalid(format!("mode {} has no potential", params.mode)));
    }
    let f = featurize(sys, x, params.equivariant)?;
    Ok(params.net.forward(&f, 1)[0])
}

/// A batch of bias forces recorded on a tape as a function of the states
/// and the network parameters.
pub struct BiasTape {
    pub tape: Tape,
    pub x: Var,
    pub params: Vec<Var>,
    pub bias: Var,
}

fn col_const(tape: &mut Tape, data: Vec<f64>) -> Var {
    let rows = data.len();
    tape.constant(Tensor::matrix(rows, 1, data))
}

/// `out_k = Σ_j v_j · M(j, k)` per row, with `M` supplied as `[rows, d, d]`.
fn rowwise_linear(tape: &mut Tape, v: Var, mats: &[f64], d: usize, transpose: bool) -> Result<Var> {
    let rows = tape.value(v).shape()[0];
    let mut cols = Vec::with_capacity(d);
    for k in 0..d {
        let mut acc: Option<Var> = None;
        for j in 0..d {
            let coef: Vec<f64> = (0..rows)
                .map(|r| {
                    let m = &mats[r * d * d..(r + 1) * d * d];
                    // transpose=true: Rᵀ v, element (k) = Σ_j R[j][k] v_j
                    if transpose { m[j * d + k] } else { m[k * d + j] }
                })
                .collect();
            let c = col_const(tape, coef);
            let vj = tape.slice_cols(v, j, j + 1)?;
            let term = tape.mul(vj, c)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        cols.push(acc.expect("d >= 1"));
    }
    Ok(tape.concat(&cols)?)
}

/// Record `b(X; θ)` for `rows` states with `X` as a tape leaf.
pub fn record_bias(params: &PolicyParams, sys: &SystemSpec, xs: &[f64], rows: usize) -> Result<BiasTape> {
    let (n, d, na) = (sys.dim(), sys.spatial_dim, sys.n_atoms);
    let fr = frames(sys, xs, rows, params.equivariant);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(rows, n, xs[..rows * n].to_vec()));
    let targets = tape.constant(Tensor::matrix(rows, n, fr.targets.clone()));
    let trans = tape.constant(Tensor::matrix(rows, d, fr.translations.clone()));
    let mut parts = Vec::with_capacity(2 * na);
    let mut diffs = Vec::with_capacity(na);
    for a in 0..na {
        let xa = tape.slice_cols(x, a * d, (a + 1) * d)?;
        let ta = tape.slice_cols(targets, a * d, (a + 1) * d)?;
        let diff = tape.sub(xa, ta)?;
        let sq = tape.square(diff)?;
        let ss = tape.sum_axis(sq, 1)?;
        let dist = tape.sqrt(ss)?;
        let y = match &fr.rotations {
            Some(rots) => {
                let shifted = tape.sub(xa, trans)?;
                rowwise_linear(&mut tape, shifted, rots, d, true)?
            }
            None => xa,
        };
        parts.push(y);
        parts.push(dist);
        diffs.push(diff);
    }
    let feats = tape.concat(&parts)?;
    let rec = params.net.record(&mut tape, feats)?;
    let out = rec.output;
    let bias = match params.mode {
        Mode::F => match &fr.rotations {
            Some(rots) => {
                let mut atoms = Vec::with_capacity(na);
                for a in 0..na {
                    let oa = tape.slice_cols(out, a * d, (a + 1) * d)?;
                    atoms.push(rowwise_linear(&mut tape, oa, rots, d, false)?);
                }
                tape.concat(&atoms)?
            }
            None => out,
        },
        Mode::S => {
            let mut atoms = Vec::with_capacity(na);
            for (a, diff) in diffs.iter().enumerate() {
                let oa = tape.slice_cols(out, a, a + 1)?;
                let s = tape.softplus(oa)?;
                let sb = tape.broadcast_to(s, &[rows, d])?;
                let towards = tape.neg(*diff)?;
                atoms.push(tape.mul(sb, towards)?);
            }
            tape.concat(&atoms)?
        }
        Mode::P => {
            let phi = tape.sum(out)?;
            let gx = tape.gradient(phi, &[x])?[0];
            tape.neg(gx)?
        }
    };
    Ok(BiasTape {
        tape,
        x,
        params: rec.params,
        bias,
    })
}

/// Vector-Jacobian products of `Σ cot ⊙ b(X; θ)` over a batch.
///
/// Returns the parameter gradient (flattened like [`Mlp::flatten`]) and,
/// when `with_state` is set, the gradient with respect to the states.
pub fn bias_vjp(
    params: &PolicyParams,
    sys: &SystemSpec,
    xs: &[f64],
    rows: usize,
    cot: &[f64],
    with_state: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let n = sys.dim();
    let starts: Vec<usize> = (0..rows).step_by(TAPE_CHUNK).collect();
    let parts: Vec<(Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .map(|&start| {
            let m = TAPE_CHUNK.min(rows - start);
            let mut bt = record_bias(params, sys, &xs[start * n..(start + m) * n], m)?;
            let c = bt
                .tape
                .constant(Tensor::matrix(m, n, cot[start * n..(start + m) * n].to_vec()));
            let prod = bt.tape.mul(bt.bias, c)?;
            let s = bt.tape.sum(prod)?;
            let mut wrt = bt.params.clone();
            if with_state {
                wrt.push(bt.x);
            }
            let grads = bt.tape.gradient(s, &wrt)?;
            let gp = flatten_grads(&bt.tape, &grads[..bt.params.len()]);
            let gx = if with_state {
                bt.tape.value(*grads.last().unwrap()).data().to_vec()
            } else {
                Vec::new()
            };
            Ok((gp, gx))
        })
        .collect::<Result<_>>()?;
    let mut gp = vec![0.0; params.net.n_params()];
    let mut gx = with_state.then(|| Vec::with_capacity(rows * n));
    for (p, x) in parts {
        for (a, g) in gp.iter_mut().zip(&p) {
            *a += g;
        }
        if let Some(gx) = gx.as_mut() {
            gx.extend_from_slice(&x);
        }
    }
    Ok((gp, gx))
}

/// Largest step for which the S-mode update is guaranteed to approach the
/// target: `2 (b/m)·(ρR_B − R) / ‖b/m‖²`.
pub fn s_mode_step_bound(params: &PolicyParams, sys: &SystemSpec, x: &[f64]) -> Result<f64> {
    let (disp, bm) = s_mode_displacement(params, sys, x)?;
    let num: f64 = bm.iter().zip(&disp).map(|(a, b)| a * b).sum();
    let den: f64 = bm.iter().map(|a| a * a).sum();
    Ok(2.0 * num / den)
}

fn s_mode_displacement(params: &PolicyParams, sys: &SystemSpec, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if params.mode != Mode::S {
        return Err(CoreError::Invalid("distance-decrease check needs S mode".into()));
    }
    let fr = frames(sys, x, 1, params.equivariant);
    let disp: Vec<f64> = fr.targets.iter().zip(x).map(|(t, r)| t - r).collect();
    if disp.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
        return Err(CoreError::Invalid("state is already aligned with the target".into()));
    }
    let b = bias_batch(params, sys, x, 1)?;
    let n = sys.dim();
    let bm = b.iter().enumerate().map(|(i, v)| v / sys.masses[i % n]).collect();
    Ok((disp, bm))
}

/// Whether one noise-free S-mode step of size `dt` strictly reduces the
/// aligned distance to the target.
pub fn s_mode_distance_decrease(params: &PolicyParams, sys: &SystemSpec, x: &[f64], dt: f64) -> Result<bool> {
    let (disp, bm) = s_mode_displacement(params, sys, x)?;
    let before = disp.iter().map(|v| v * v).sum::<f64>().sqrt();
    let next: Vec<f64> = x.iter().zip(&bm).map(|(r, v)| r + v * dt).collect();
    let after = if params.equivariant {
        aligned_rmsd(&next, &sys.r_b, sys.spatial_dim)? * (sys.n_atoms as f64).sqrt()
    } else {
        next.iter().zip(&sys.r_b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    Ok(after < before)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn double_well_features_at_target() {
        let sys = SystemSpec::double_well().unwrap();
        let f = featurize(&sys, &sys.r_b, true).unwrap();
        assert_eq!(f, vec![sys.r_b[0], sys.r_b[1], 0.0]);
    }

    #[test]
    fn zero_output_layer_gives_zero_bias() {
        let sys = SystemSpec::double_well().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [Mode::F, Mode::P] {
            let p = PolicyParams::init(&sys, mode, &[16, 16], true, &mut rng);
            let b = bias_force(&p, &sys, &[0.3, -0.2]).unwrap();
            assert!(b.bias.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("p".parse::<Mode>().unwrap(), Mode::P);
        assert!("x".parse::<Mode>().is_err());
    }
}
