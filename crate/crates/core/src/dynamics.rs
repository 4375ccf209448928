//! Euler–Maruyama simulation of biased Langevin dynamics.
//!
//! A state is `R` (overdamped) or `R` followed by `V` (underdamped). Noise
//! acts on one channel of `n = N·d` coordinates: positions when overdamped,
//! velocities when underdamped. Policy values are stored standardized at the
//! base temperature, `v = b / (m σ_λ)` with `σ_λ = √(2γ k_B λ / m)`.

use std::io::{BufRead, BufWriter, Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::policy::{bias_batch, PolicyParams};
use crate::rng::{path_stream, ROLLOUT};
use crate::systems::{Integrator, SystemSpec};

/// Paths stepped together; fixed so results do not depend on thread count.
pub const ROLLOUT_CHUNK: usize = 64;

const PATH_MAGIC: &[u8; 8] = b"TPSPATH1";

/// Anything that produces a bias force for a batch of positions.
pub trait BiasField: Sync {
    /// Bias forces `[rows, n]` at step `step` for positions `[rows, n]`.
    fn bias(&self, sys: &SystemSpec, positions: &[f64], rows: usize, step: usize) -> Result<Vec<f64>>;
}

/// The zero bias (unbiased MD).
#[derive(Clone, Copy, Debug, Default)]
pub struct NoBias;

impl BiasField for NoBias {
    fn bias(&self, sys: &SystemSpec, _: &[f64], rows: usize, _: usize) -> Result<Vec<f64>> {
        Ok(vec![0.0; rows * sys.dim()])
    }
}

impl BiasField for PolicyParams {
    fn bias(&self, sys: &SystemSpec, positions: &[f64], rows: usize, _: usize) -> Result<Vec<f64>> {
        bias_batch(self, sys, positions, rows)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialVelocity {
    #[default]
    Zero,
    MaxwellBoltzmann,
}

/// Phase-space point with an explicit step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct MDState {
    pub r: Vec<f64>,
    pub v: Option<Vec<f64>>,
    pub t_index: usize,
}

impl MDState {
    pub fn initial(sys: &SystemSpec) -> Self {
        Self {
            r: sys.r_a.clone(),
            v: (sys.integrator == Integrator::Underdamped).then(|| vec![0.0; sys.dim()]),
            t_index: 0,
        }
    }

    pub fn from_flat(sys: &SystemSpec, x: &[f64], t_index: usize) -> Self {
        let n = sys.dim();
        Self {
            r: x[..n].to_vec(),
            v: (sys.integrator == Integrator::Underdamped).then(|| x[n..2 * n].to_vec()),
            t_index,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = self.r.clone();
        if let Some(v) = &self.v {
            x.extend_from_slice(v);
        }
        x
    }
}

/// Length of a flat state vector.
pub fn state_dim(sys: &SystemSpec) -> usize {
    match sys.integrator {
        Integrator::Overdamped => sys.dim(),
        Integrator::Underdamped => 2 * sys.dim(),
    }
}

/// Offset of the noisy channel inside a flat state.
pub fn noise_offset(sys: &SystemSpec) -> usize {
    match sys.integrator {
        Integrator::Overdamped => 0,
        Integrator::Underdamped => sys.dim(),
    }
}

/// Initial flat state `(R_A, V₀)`.
pub fn initial_state(sys: &SystemSpec, init: InitialVelocity, temperature: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut x = sys.r_a.clone();
    if sys.integrator == Integrator::Underdamped {
        match init {
            InitialVelocity::Zero => x.extend(std::iter::repeat_n(0.0, sys.dim())),
            InitialVelocity::MaxwellBoltzmann => {
                for m in &sys.masses {
                    let s = (sys.boltzmann * temperature / m).sqrt();
                    x.push(s * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
    }
    x
}

/// Drift `u(x) + Σ v(x)` for bias force `b`; `grad` is scratch of size `n`.
fn drift_into(sys: &SystemSpec, x: &[f64], b: &[f64], grad: &mut [f64], out: &mut [f64]) {
    let n = sys.dim();
    sys.energy_grad(&x[..n], grad);
    match sys.integrator {
        Integrator::Overdamped => {
            for i in 0..n {
                out[i] = (b[i] - grad[i]) / sys.masses[i];
            }
        }
        Integrator::Underdamped => {
            for i in 0..n {
                out[i] = x[n + i];
                out[n + i] = (b[i] - grad[i]) / sys.masses[i] - sys.friction * x[n + i];
            }
        }
    }
}

/// Full drift for a flat state and bias force.
pub fn drift(sys: &SystemSpec, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = sys.dim();
    if x.len() != state_dim(sys) || b.len() != n {
        return Err(CoreError::Dimension {
            expected: state_dim(sys),
            got: x.len(),
        });
    }
    let mut out = vec![0.0; x.len()];
    let mut grad = vec![0.0; n];
    drift_into(sys, x, b, &mut grad, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "drift".into(),
        });
    }
    Ok(out)
}

fn advance(sys: &SystemSpec, x: &[f64], b: &[f64], sigma: &[f64], eps: &[f64], scratch: &mut [f64], next: &mut [f64]) {
    let n = sys.dim();
    let (grad, dr) = scratch.split_at_mut(n);
    drift_into(sys, x, b, grad, dr);
    let sq = sys.dt.sqrt();
    let off = noise_offset(sys);
    for i in 0..x.len() {
        next[i] = x[i] + dr[i] * sys.dt;
    }
    for i in 0..n {
        next[off + i] += sigma[i] * sq * eps[i];
    }
}

/// One Euler–Maruyama step with given standardized noise.
pub fn step_with_noise(sys: &SystemSpec, x: &[f64], b: &[f64], temperature: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(CoreError::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    let n = sys.dim();
    if x.len() != state_dim(sys) || b.len() != n || eps.len() != n {
        return Err(CoreError::Dimension {
            expected: n,
            got: b.len().min(eps.len()),
        });
    }
    let sigma = sys.noise_scale(temperature);
    let mut scratch = vec![0.0; n + x.len()];
    let mut next = vec![0.0; x.len()];
    advance(sys, x, b, &sigma, eps, &mut scratch, &mut next);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFiniteStep { step: 0 });
    }
    Ok(next)
}

/// One step drawing fresh noise; returns the next state and the noise used.
pub fn step(
    sys: &SystemSpec,
    x: &[f64],
    b: &[f64],
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let eps: Vec<f64> = (0..sys.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let next = step_with_noise(sys, x, b, temperature, &eps)?;
    Ok((next, eps))
}

/// Noise-channel increment standardized at the base temperature,
/// `z = (Δx − u Δt) / σ_λ`, computed from states alone.
pub fn base_increment(sys: &SystemSpec, x: &[f64], x_next: &[f64], grad: &mut [f64], out: &mut [f64]) {
    let n = sys.dim();
    let zero = vec![0.0; n];
    let mut u = vec![0.0; x.len()];
    drift_into(sys, x, &zero, grad, &mut u);
    let off = noise_offset(sys);
    let sigma = sys.noise_scale(sys.base_temperature);
    for i in 0..n {
        out[i] = (x_next[off + i] - x[off + i] - u[off + i] * sys.dt) / sigma[i];
    }
}

/// Recover the standardized noise of one step from states and the stored
/// policy value `v̄` (base-standardized) at generation temperature `temperature`.
pub fn recover_noise(sys: &SystemSpec, x: &[f64], x_next: &[f64], value: &[f64], temperature: f64) -> Vec<f64> {
    let n = sys.dim();
    let mut grad = vec![0.0; n];
    let mut z = vec![0.0; n];
    base_increment(sys, x, x_next, &mut grad, &mut z);
    let kappa = (temperature / sys.base_temperature).sqrt();
    let sq = sys.dt.sqrt();
    z.iter()
        .zip(value)
        .map(|(z, v)| (z - v * sys.dt) / (kappa * sq))
        .collect()
}

/// One simulated trajectory with everything the objective needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub id: u64,
    pub state_dim: usize,
    /// Coordinates on the noisy channel, `n`.
    pub noise_dim: usize,
    /// `[(L+1), state_dim]`.
    pub states: Vec<f64>,
    /// Standardized noises `[L, n]`.
    pub noises: Vec<f64>,
    /// Detached base-standardized policy values `[L, n]`.
    pub policy_values: Vec<f64>,
    pub gen_temperature: f64,
    /// Unbiased log-density up to the truncation index (constants dropped).
    pub log_p0: f64,
    pub log_indicator: f64,
    pub truncation: usize,
}

impl Path {
    /// Number of steps `L`.
    pub fn steps(&self) -> usize {
        self.noises.len() / self.noise_dim
    }

    pub fn state(&self, l: usize) -> &[f64] {
        &self.states[l * self.state_dim..(l + 1) * self.state_dim]
    }

    pub fn positions(&self, l: usize) -> &[f64] {
        &self.states[l * self.state_dim..l * self.state_dim + self.noise_dim]
    }

    pub fn final_positions(&self) -> &[f64] {
        self.positions(self.steps())
    }

    pub fn noise(&self, l: usize) -> &[f64] {
        &self.noises[l * self.noise_dim..(l + 1) * self.noise_dim]
    }

    pub fn value(&self, l: usize) -> &[f64] {
        &self.policy_values[l * self.noise_dim..(l + 1) * self.noise_dim]
    }

    pub fn md_state(&self, sys: &SystemSpec, l: usize) -> MDState {
        MDState::from_flat(sys, self.state(l), l)
    }

    /// Flattened positions `[(L+1), n]`.
    pub fn position_trajectory(&self) -> Vec<f64> {
        (0..=self.steps()).flat_map(|l| self.positions(l).iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().chain(&self.noises).chain(&self.policy_values).all(|v| v.is_finite())
    }

    /// CSV with header `step,x0,..,energy`; one row per state.
    pub fn write_csv(&self, sys: &SystemSpec, w: &mut impl Write) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        write!(w, "step")?;
        for i in 0..self.state_dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w, ",energy")?;
        for l in 0..=self.steps() {
            write!(w, "{l}")?;
            for v in self.state(l) {
                write!(w, ",{v:e}")?;
            }
            writeln!(w, ",{:e}", sys.energy_unchecked(self.positions(l)))?;
        }
        w.flush()
    }

    /// Positions per step from a CSV written by [`Path::write_csv`].
    pub fn read_csv_states(r: impl BufRead) -> Result<(usize, Vec<f64>)> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::Invalid("empty path csv".into()))?
            .map_err(|e| CoreError::Invalid(e.to_string()))?;
        let dim = header.split(',').count().saturating_sub(2);
        let mut out = Vec::new();
        for line in lines {
            let line = line.map_err(|e| CoreError::Invalid(e.to_string()))?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(CoreError::Invalid(format!("csv row has {} fields, expected {}", fields.len(), dim + 2)));
            }
            for f in &fields[1..=dim] {
                out.push(f.parse::<f64>().map_err(|e| CoreError::Invalid(e.to_string()))?);
            }
        }
        Ok((dim, out))
    }

    /// Little-endian binary container.
    pub fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(PATH_MAGIC)?;
        for v in [self.id, self.steps() as u64, self.state_dim as u64, self.noise_dim as u64, self.truncation as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [self.gen_temperature, self.log_p0, self.log_indicator] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.states.iter().chain(&self.noises).chain(&self.policy_values) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| CoreError::Invalid(format!("path container: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != PATH_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u = [0u64; 5];
        let mut buf = [0u8; 8];
        for v in u.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
            *v = u64::from_le_bytes(buf);
        }
        let [id, steps, state_dim, noise_dim, truncation] = u.map(|v| v as usize);
        if steps == 0 || noise_dim == 0 || state_dim < noise_dim || truncation > steps || steps > 1 << 32 {
            return Err(bad("inconsistent header"));
        }
        let mut f = [0f64; 3];
        for v in f.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
            *v = f64::from_le_bytes(buf);
        }
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes).map_err(|_| bad("truncated body"))?;
            Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let states = read_vec((steps + 1) * state_dim)?;
        let noises = read_vec(steps * noise_dim)?;
        let policy_values = read_vec(steps * noise_dim)?;
        Ok(Self {
            id: id as u64,
            state_dim,
            noise_dim,
            states,
            noises,
            policy_values,
            gen_temperature: f[0],
            log_p0: f[1],
            log_indicator: f[2],
            truncation,
        })
    }
}

/// Settings for a batch of rollouts.
#[derive(Clone, Debug)]
pub struct RolloutSpec {
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Distinguishes batches drawn with the same seed (e.g. the rollout index).
    pub batch: u64,
    pub init: InitialVelocity,
    /// Named random substream (see [`crate::rng`]).
    pub stream: &'static str,
}

impl RolloutSpec {
    pub fn new(steps: usize, temperature: f64, seed: u64, batch: u64) -> Self {
        Self {
            steps,
            temperature,
            seed,
            batch,
            init: InitialVelocity::Zero,
            stream: ROLLOUT,
        }
    }

    pub fn with_stream(mut self, stream: &'static str) -> Self {
        self.stream = stream;
        self
    }
}

/// Simulate paths `first_id .. first_id + count` under `field`.
pub fn rollout_batch(
    sys: &SystemSpec,
    field: &dyn BiasField,
    spec: &RolloutSpec,
    first_id: u64,
    count: usize,
) -> Result<Vec<Path>> {
    if spec.steps == 0 {
        return Err(CoreError::Invalid("rollout needs at least one step".into()));
    }
    if !(spec.temperature > 0.0) {
        return Err(CoreError::Invalid(format!("temperature must be positive, got {}", spec.temperature)));
    }
    let starts: Vec<u64> = (0..count).step_by(ROLLOUT_CHUNK).map(|s| first_id + s as u64).collect();
    let chunks: Vec<Vec<Path>> = starts
        .par_iter()
        .map(|&start| {
            let end = (first_id + count as u64).min(start + ROLLOUT_CHUNK as u64);
            rollout_chunk(sys, field, spec, start, (end - start) as usize)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Single path with id `path_id`.
pub fn rollout(sys: &SystemSpec, field: &dyn BiasField, spec: &RolloutSpec, path_id: u64) -> Result<Path> {
    Ok(rollout_batch(sys, field, spec, path_id, 1)?.remove(0))
}

fn rollout_chunk(sys: &SystemSpec, field: &dyn BiasField, spec: &RolloutSpec, first_id: u64, rows: usize) -> Result<Vec<Path>> {
    let (n, sd, steps) = (sys.dim(), state_dim(sys), spec.steps);
    let sigma = sys.noise_scale(spec.temperature);
    let sigma_base = sys.noise_scale(sys.base_temperature);
    let mut rngs: Vec<_> = (0..rows)
        .map(|i| path_stream(spec.seed, spec.stream, spec.batch, first_id + i as u64))
        .collect();
    let mut paths: Vec<Path> = rngs
        .iter_mut()
        .enumerate()
        .map(|(i, rng)| {
            let mut states = Vec::with_capacity((steps + 1) * sd);
            states.extend(initial_state(sys, spec.init, spec.temperature, rng));
            Path {
                id: first_id + i as u64,
                state_dim: sd,
                noise_dim: n,
                states,
                noises: Vec::with_capacity(steps * n),
                policy_values: Vec::with_capacity(steps * n),
                gen_temperature: spec.temperature,
                log_p0: 0.0,
                log_indicator: 0.0,
                truncation: steps,
            }
        })
        .collect();
    let mut pos = vec![0.0; rows * n];
    let mut scratch = vec![0.0; n + sd];
    let mut eps = vec![0.0; n];
    let mut next = vec![0.0; sd];
    for l in 0..steps {
        for (p, dst) in paths.iter().zip(pos.chunks_exact_mut(n)) {
            dst.copy_from_slice(p.positions(l));
        }
        let b = field.bias(sys, &pos, rows, l)?;
        for ((p, rng), bi) in paths.iter_mut().zip(rngs.iter_mut()).zip(b.chunks_exact(n)) {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            advance(sys, p.state(l), bi, &sigma, &eps, &mut scratch, &mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFiniteStep { step: l });
            }
            p.states.extend_from_slice(&next);
            p.noises.extend_from_slice(&eps);
            p.policy_values
                .extend(bi.iter().zip(&sys.masses).zip(&sigma_base).map(|((b, m), s)| b / (m * s)));
        }
    }
    Ok(paths)
}
