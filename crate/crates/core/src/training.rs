//! Off-policy training loop: annealed rollouts into a replay buffer followed
//! by clipped Adam updates on `θ` and `w`.

use std::io::Write;
use std::path::Path as FsPath;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{rollout_batch, Path, RolloutSpec};
use crate::error::{CoreError, Result};
use crate::geometry::aligned_rmsd;
use crate::io::{config_hash, read_checkpoint, read_json, write_checkpoint, write_json, Checkpoint};
use crate::objective::{annotate, kl_loss, loss, ControlVariate, IndicatorKind, IndicatorSpec, ReplayBuffer};
use crate::optim::{clip_grad_norm, Adam};
use crate::policy::{Mode, PolicyParams};
use crate::rng::{substream, BUFFER_SAMPLE, INIT};
use crate::systems::{Integrator, SystemSpec};

/// Consecutive non-finite updates tolerated before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 3;

/// Batch index offset for the fresh on-policy rollouts of the KL objective.
const KL_BATCH_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    LogVariance,
    Kl,
}

/// The six ablations of the training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    KlLoss,
    LocalControlVariate,
    NoReplay,
    NoAnnealing,
    FinalStateOnly,
    NoEquivariance,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::KlLoss,
        Ablation::LocalControlVariate,
        Ablation::NoReplay,
        Ablation::NoAnnealing,
        Ablation::FinalStateOnly,
        Ablation::NoEquivariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::KlLoss => "kl_loss",
            Ablation::LocalControlVariate => "local_control_variate",
            Ablation::NoReplay => "no_replay",
            Ablation::NoAnnealing => "no_annealing",
            Ablation::FinalStateOnly => "final_state_only",
            Ablation::NoEquivariance => "no_equivariance",
        }
    }

    /// The variant of `cfg` with this component removed.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::KlLoss => c.objective = Objective::Kl,
            Ablation::LocalControlVariate => c.control_variate = ControlVariate::Local,
            Ablation::NoReplay => c.replay = false,
            Ablation::NoAnnealing => c.temp_start = c.temp_end,
            Ablation::FinalStateOnly => c.indicator = IndicatorKind::RbfFinal,
            Ablation::NoEquivariance => c.equivariant = false,
        }
        c
    }
}

impl FromStr for Ablation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
            CoreError::Config(format!("unknown ablation '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub system: String,
    pub mode: Mode,
    pub hidden: Vec<usize>,
    /// Rollouts `I`.
    pub rollouts: usize,
    /// Paths per rollout `M`.
    pub samples: usize,
    /// Paths per update `K`.
    pub batch: usize,
    /// Updates per rollout `J`.
    pub updates: usize,
    pub buffer_capacity: usize,
    pub temp_start: f64,
    /// Base temperature `λ`; densities and evaluation use it.
    pub temp_end: f64,
    /// Steps per path `L`; `None` uses the system horizon.
    pub steps: Option<usize>,
    pub integrator: Option<Integrator>,
    pub lr: f64,
    pub w_lr: f64,
    pub clip: f64,
    pub indicator: IndicatorKind,
    pub sigma: f64,
    pub equivariant: bool,
    pub objective: Objective,
    pub control_variate: ControlVariate,
    pub replay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            system: "double_well".into(),
            mode: Mode::F,
            hidden: vec![64, 64],
            rollouts: 20,
            samples: 512,
            batch: 512,
            updates: 1000,
            buffer_capacity: 10_000,
            temp_start: 2400.0,
            temp_end: 1200.0,
            steps: None,
            integrator: None,
            lr: 1e-4,
            w_lr: 1e-3,
            clip: 1.0,
            indicator: IndicatorKind::RbfMax,
            sigma: 3.0,
            equivariant: true,
            objective: Objective::LogVariance,
            control_variate: ControlVariate::Learned,
            replay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.rollouts == 0 || self.samples == 0 || self.batch == 0 {
            return bad("rollouts, samples and batch must be at least 1".into());
        }
        if self.batch > self.buffer_capacity {
            return bad(format!("batch {} exceeds buffer capacity {}", self.batch, self.buffer_capacity));
        }
        if !self.replay && self.batch > self.samples {
            return bad(format!("without replay the batch {} cannot exceed samples {}", self.batch, self.samples));
        }
        if !(self.temp_end > 0.0) || !(self.temp_start >= self.temp_end) || !self.temp_start.is_finite() {
            return bad(format!(
                "need temp_start >= temp_end > 0, got {} and {}",
                self.temp_start, self.temp_end
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.steps == Some(0) {
            return bad("steps must be at least 1".into());
        }
        for (name, v) in [("lr", self.lr), ("w_lr", self.w_lr), ("clip", self.clip), ("sigma", self.sigma)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        IndicatorSpec::new(self.indicator, self.sigma)?;
        Ok(())
    }

    pub fn indicator_spec(&self) -> IndicatorSpec {
        IndicatorSpec {
            kind: self.indicator,
            sigma: self.sigma,
        }
    }

    /// The system with this config's base temperature, horizon and integrator.
    pub fn system_spec(&self) -> Result<SystemSpec> {
        let mut sys = SystemSpec::by_name(&self.system)?;
        sys.base_temperature = self.temp_end;
        if let Some(l) = self.steps {
            sys.horizon = l;
        }
        if let Some(i) = self.integrator {
            sys.integrator = i;
        }
        sys.validate()?;
        Ok(sys)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Temperature of rollout `i` (1-based): linear from `λ_start` to `λ_end`.
pub fn anneal(i: usize, cfg: &TrainConfig) -> f64 {
    let n = cfg.rollouts;
    if n <= 1 || i >= n {
        return cfg.temp_end;
    }
    if i <= 1 {
        return cfg.temp_start;
    }
    cfg.temp_start + (i - 1) as f64 / (n - 1) as f64 * (cfg.temp_end - cfg.temp_start)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub rollout: usize,
    pub temperature: f64,
    pub loss_first: f64,
    pub loss_mean: f64,
    pub loss_last: f64,
    /// Variance of the log-ratios over the last update's batch.
    pub residual_var: f64,
    pub w: f64,
    pub hit_fraction: f64,
    pub mean_rmsd: f64,
    pub buffer_size: usize,
    /// Cumulative biased MD steps.
    pub energy_evals: u64,
    pub skipped_updates: usize,
    pub sentinel_batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<RolloutRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "rollout,temperature,loss_first,loss_mean,loss_last,residual_var,w,hit_fraction,mean_rmsd,buffer_size,energy_evals,skipped_updates,sentinel_batches";

impl RolloutRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{},{:e},{},{},{},{}",
            self.rollout,
            self.temperature,
            self.loss_first,
            self.loss_mean,
            self.loss_last,
            self.residual_var,
            self.w,
            self.hit_fraction,
            self.mean_rmsd,
            self.buffer_size,
            self.energy_evals,
            self.skipped_updates,
            self.sentinel_batches
        )
    }
}

impl TrainLog {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
        for r in &self.records {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

/// Hit fraction and mean final RMSD of an ensemble.
pub fn ensemble_summary(sys: &SystemSpec, paths: &[Path]) -> (f64, f64) {
    if paths.is_empty() {
        return (0.0, f64::NAN);
    }
    let k = paths.len() as f64;
    let hits = paths.iter().filter(|p| sys.in_target(p.final_positions())).count() as f64;
    let rmsd = paths
        .iter()
        .map(|p| aligned_rmsd(p.final_positions(), &sys.r_b, sys.spatial_dim).unwrap_or(f64::NAN))
        .sum::<f64>()
        / k;
    (hits / k, rmsd)
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    config_hash: String,
    next_rollout: usize,
    energy_evals: u64,
    log: TrainLog,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub sys: SystemSpec,
    pub params: PolicyParams,
    pub opt_theta: Adam,
    pub opt_w: Adam,
    pub buffer: ReplayBuffer,
    pub log: TrainLog,
    /// Next rollout index, 1-based.
    pub next_rollout: usize,
    pub energy_evals: u64,
    /// Wall-clock seconds per rollout (kept out of the log for reproducibility).
    pub wall_times: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sys = cfg.system_spec()?;
        let mut rng = substream(cfg.seed, INIT, 0);
        let params = PolicyParams::init(&sys, cfg.mode, &cfg.hidden, cfg.equivariant, &mut rng);
        let n = params.net.n_params();
        let capacity = if cfg.replay { cfg.buffer_capacity } else { cfg.samples };
        Ok(Self {
            opt_theta: Adam::new(n, cfg.lr),
            opt_w: Adam::new(1, cfg.w_lr),
            buffer: ReplayBuffer::new(capacity)?,
            log: TrainLog::default(),
            next_rollout: 1,
            energy_evals: 0,
            wall_times: Vec::new(),
            params,
            sys,
            cfg,
        })
    }

    pub fn finished(&self) -> bool {
        self.next_rollout > self.cfg.rollouts
    }

    /// One rollout followed by `J` updates.
    pub fn run_rollout(&mut self) -> Result<RolloutRecord> {
        let start = Instant::now();
        let i = self.next_rollout;
        let temperature = anneal(i, &self.cfg);
        let spec = self.cfg.indicator_spec();
        let m = self.cfg.samples;
        let fresh = self.simulate(temperature, i as u64, m)?;
        let (hit_fraction, mean_rmsd) = ensemble_summary(&self.sys, &fresh);
        if !self.cfg.replay {
            self.buffer.clear();
        }
        self.buffer.push(fresh);
        let mut losses = Vec::with_capacity(self.cfg.updates);
        let mut residual_var = f64::NAN;
        let mut bad_streak = 0;
        let mut skipped = 0;
        let mut sentinel = 0;
        let mut rng = substream(self.cfg.seed, BUFFER_SAMPLE, i as u64);
        for j in 0..self.cfg.updates {
            let step = match self.cfg.objective {
                Objective::LogVariance => {
                    let batch = self.buffer.sample(self.cfg.batch, &mut rng)?;
                    loss(&self.sys, &batch, &self.params, self.params.w, self.cfg.control_variate)
                        .map(|lv| {
                            if lv.all_sentinel {
                                sentinel += 1;
                            }
                            let k = lv.log_ratios.len() as f64;
                            let mean = lv.log_ratios.iter().sum::<f64>() / k;
                            residual_var = lv.log_ratios.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / k;
                            (lv.loss, lv.grad_theta, lv.grad_w)
                        })
                }
                Objective::Kl => {
                    let batch_id = KL_BATCH_BASE + ((i as u64) << 20) + j as u64;
                    let paths = self.simulate(temperature, batch_id, self.cfg.batch)?;
                    let refs: Vec<&Path> = paths.iter().collect();
                    kl_loss(&self.sys, &refs, &self.params, &spec).map(|kv| (kv.loss, kv.grad_theta, 0.0))
                }
            };
            let step = match step {
                Err(CoreError::NonFinite { .. }) | Err(CoreError::Autodiff(_)) => None,
                Err(e) => return Err(e),
                Ok(v) if v.0.is_finite() && v.2.is_finite() && v.1.iter().all(|g| g.is_finite()) => Some(v),
                Ok(_) => None,
            };
            let Some((l, mut g, gw)) = step else {
                bad_streak += 1;
                skipped += 1;
                if bad_streak >= DIVERGENCE_PATIENCE {
                    return Err(CoreError::Diverged(i));
                }
                continue;
            };
            bad_streak = 0;
            losses.push(l);
            clip_grad_norm(&mut g, self.cfg.clip);
            let mut flat = self.params.net.flatten();
            self.opt_theta.step(&mut flat, &g);
            self.params.net.set_flat(&flat);
            if self.cfg.objective == Objective::LogVariance && self.cfg.control_variate == ControlVariate::Learned {
                let mut w = [self.params.w];
                self.opt_w.step(&mut w, &[gw]);
                self.params.w = w[0];
            }
        }
        let nan = f64::NAN;
        let record = RolloutRecord {
            rollout: i,
            temperature,
            loss_first: losses.first().copied().unwrap_or(nan),
            loss_mean: if losses.is_empty() { nan } else { losses.iter().sum::<f64>() / losses.len() as f64 },
            loss_last: losses.last().copied().unwrap_or(nan),
            residual_var,
            w: self.params.w,
            hit_fraction,
            mean_rmsd,
            buffer_size: self.buffer.len(),
            energy_evals: self.energy_evals,
            skipped_updates: skipped,
            sentinel_batches: sentinel,
        };
        self.log.records.push(record.clone());
        self.next_rollout += 1;
        self.wall_times.push(start.elapsed().as_secs_f64());
        Ok(record)
    }

    fn simulate(&mut self, temperature: f64, batch: u64, count: usize) -> Result<Vec<Path>> {
        let spec = RolloutSpec::new(self.sys.horizon, temperature, self.cfg.seed, batch);
        let mut paths = rollout_batch(&self.sys, &self.params, &spec, 0, count).map_err(|e| match e {
            CoreError::NonFiniteStep { .. } | CoreError::NonFinite { .. } => CoreError::Diverged(self.next_rollout),
            other => other,
        })?;
        self.energy_evals += (count * self.sys.horizon) as u64;
        let ind = self.cfg.indicator_spec();
        for p in paths.iter_mut() {
            annotate(&ind, &self.sys, p);
        }
        Ok(paths)
    }

    /// Run the remaining rollouts, calling `on_rollout` after each.
    pub fn run(&mut self, mut on_rollout: impl FnMut(&Trainer, &RolloutRecord) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let rec = self.run_rollout()?;
            on_rollout(self, &rec)?;
        }
        Ok(())
    }

    /// Write checkpoint, optimizer state, buffer and log to `dir`.
    pub fn save(&self, dir: &FsPath) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        write_checkpoint(
            &dir.join("checkpoint.bin"),
            &Checkpoint {
                params: self.params.clone(),
                optimizer: Some((self.opt_theta.clone(), self.opt_w.clone())),
            },
        )?;
        self.buffer.save(dir)?;
        write_json(
            &dir.join("train_state.json"),
            &TrainState {
                config_hash: self.cfg.hash(),
                next_rollout: self.next_rollout,
                energy_evals: self.energy_evals,
                log: self.log.clone(),
            },
        )?;
        let csv = dir.join("train_log.csv");
        let mut f = std::fs::File::create(&csv).map_err(|e| CoreError::io(&csv, e))?;
        self.log.write_csv(&mut f).map_err(|e| CoreError::io(&csv, e))
    }

    /// Continue from a directory written by [`Trainer::save`].
    pub fn resume(cfg: TrainConfig, dir: &FsPath) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let state: TrainState = read_json(&dir.join("train_state.json"))?;
        if state.config_hash != t.cfg.hash() {
            return Err(CoreError::Config(format!(
                "resume directory was written by config {} but the current config hashes to {}",
                state.config_hash,
                t.cfg.hash()
            )));
        }
        let ckpt = read_checkpoint(&dir.join("checkpoint.bin"))?;
        ckpt.params.check_system(&t.sys)?;
        if ckpt.params.mode != t.cfg.mode {
            return Err(CoreError::Config("checkpoint mode differs from config".into()));
        }
        let (a, b) = ckpt
            .optimizer
            .ok_or_else(|| CoreError::Config("checkpoint has no optimizer state".into()))?;
        t.params = ckpt.params;
        t.opt_theta = a;
        t.opt_w = b;
        t.buffer = ReplayBuffer::load(dir)?;
        t.next_rollout = state.next_rollout;
        t.energy_evals = state.energy_evals;
        t.log = state.log;
        Ok(t)
    }
}

/// Train from scratch and return the final parameters and log.
pub fn train(cfg: TrainConfig) -> Result<(PolicyParams, TrainLog)> {
    let mut t = Trainer::new(cfg)?;
    t.run(|_, _| Ok(()))?;
    Ok((t.params, t.log))
}
