//! Command implementations. Every output directory gets `config.toml`
//! and `run.json` so the run can be replayed from the directory alone.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tps_core::baselines::{run_smd, run_umd, Restraint, SmdAnchor, SmdSchedule};
use tps_core::dynamics::{rollout_batch, Path as TrajPath, RolloutSpec};
use tps_core::eval::{report, write_report, EtsScan, ReportMeta, RunReport};
use tps_core::io::{config_hash, read_checkpoint, read_json, read_paths, write_json, write_paths};
use tps_core::policy::{bias_force, potential, Mode, PolicyParams};
use tps_core::rng::EVAL;
use tps_core::systems::SystemSpec;
use tps_core::training::{Ablation, Trainer};
use tps_core::{CoreError, Result};

use crate::config::RunConfig;
use crate::VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub seed: u64,
    pub version: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default)]
pub struct Ensemble {
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub save_paths: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SmdArgs {
    pub k: f64,
    pub anchor: SmdAnchor,
    pub restraint: Restraint,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn write_provenance(dir: &Path, snapshot: &str, meta: &RunMeta) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("config.toml"), snapshot)?;
    write_json(&dir.join("run.json"), meta)
}

fn meta(command: &str, seed: u64, hash: String) -> RunMeta {
    RunMeta {
        command: command.into(),
        seed,
        version: VERSION.into(),
        config_hash: hash,
    }
}

fn summarize(rep: &RunReport) {
    let ets = rep.ets_summary.map_or("n/a".to_string(), |s| s.to_string());
    println!(
        "{}: paths {} | RMSD {} | THP {:.2}% | ETS {} | channels +{} / -{}",
        rep.meta.label, rep.paths, rep.rmsd_summary, rep.thp, ets, rep.channels.positive, rep.channels.negative
    );
}

fn finish_ensemble(
    dir: &Path,
    sys: &SystemSpec,
    paths: &[TrajPath],
    meta: ReportMeta,
    save: bool,
    acceptance: Option<f64>,
) -> Result<RunReport> {
    let mut rep = report(sys, paths, meta)?;
    rep.acceptance_rate = acceptance;
    write_report(dir, &rep)?;
    if save {
        write_paths(&dir.join("paths.bin"), paths)?;
    }
    summarize(&rep);
    Ok(rep)
}

fn train_dir(root: &Path, cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.out.clone()).unwrap_or_else(|| {
        root.join(format!("train-{}-{}-s{}", cfg.train.system, cfg.train.mode, cfg.train.seed))
    })
}

fn run_training(
    dir: &Path,
    cfg: &RunConfig,
    resume: bool,
    save_every: usize,
    max_rollouts: Option<usize>,
    command: &str,
) -> Result<Trainer> {
    let hash = cfg.train.hash();
    let mut trainer = if resume {
        Trainer::resume(cfg.train.clone(), dir)?
    } else {
        Trainer::new(cfg.train.clone())?
    };
    write_provenance(dir, &cfg.to_toml(), &meta(command, cfg.train.seed, hash))?;
    let timing = dir.join("wall_time.log");
    let every = save_every.max(1);
    let mut budget = max_rollouts.unwrap_or(usize::MAX);
    while !trainer.finished() && budget > 0 {
        budget -= 1;
        let rec = trainer.run_rollout()?;
        let t = &trainer;
        eprintln!(
            "rollout {:>3}/{} T={:.0}K loss {:.4e} -> {:.4e} hit {:.3} rmsd {:.3} w {:.3}",
            rec.rollout,
            t.cfg.rollouts,
            rec.temperature,
            rec.loss_first,
            rec.loss_last,
            rec.hit_fraction,
            rec.mean_rmsd,
            rec.w
        );
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&timing)
            .map_err(|e| CoreError::io(&timing, e))?;
        writeln!(f, "rollout {} {:.3}s", rec.rollout, t.wall_times.last().copied().unwrap_or(0.0))
            .map_err(|e| CoreError::io(&timing, e))?;
        if rec.rollout % every == 0 || t.finished() || budget == 0 {
            t.save(dir)?;
        }
    }
    Ok(trainer)
}

pub fn train(
    root: &Path,
    config: &Path,
    out: Option<PathBuf>,
    resume: bool,
    save_every: usize,
    max_rollouts: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = train_dir(root, &cfg, out);
    if resume && !dir.join("train_state.json").exists() {
        return Err(CoreError::Config(format!("nothing to resume in {}", dir.display())));
    }
    run_training(&dir, &cfg, resume, save_every, max_rollouts, "train")?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn sample_policy(dir: &Path, cfg: &RunConfig, params: &PolicyParams, ens: &Ensemble, label: &str) -> Result<RunReport> {
    let sys = cfg.train.system_spec()?;
    params.check_system(&sys)?;
    let m = ens.paths.unwrap_or(cfg.sample.paths);
    let seed = ens.seed.unwrap_or(cfg.sample.seed);
    if m == 0 {
        return Err(CoreError::EmptyEnsemble);
    }
    let spec = RolloutSpec::new(sys.horizon, sys.base_temperature, seed, 0).with_stream(EVAL);
    let paths = rollout_batch(&sys, params, &spec, 0, m)?;
    let hash = cfg.train.hash();
    write_provenance(dir, &cfg.to_toml(), &meta(label, seed, hash.clone()))?;
    let rm = ReportMeta {
        label: label.into(),
        config_hash: hash,
        seed,
        version: VERSION.into(),
        ets_scan: cfg.sample.ets_scan,
    };
    finish_ensemble(dir, &sys, &paths, rm, ens.save_paths, None)
}

pub fn sample(root: &Path, config: &Path, checkpoint: &Path, ens: Ensemble, force: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ckpt = read_checkpoint(checkpoint)?;
    if ckpt.params.mode != cfg.train.mode {
        return Err(CoreError::Config(format!(
            "checkpoint is mode {} but config says {}",
            ckpt.params.mode, cfg.train.mode
        )));
    }
    let run_json = checkpoint.with_file_name("run.json");
    if run_json.exists() {
        let trained: RunMeta = read_json(&run_json)?;
        if trained.config_hash != cfg.train.hash() {
            let msg = format!(
                "checkpoint was trained with config {} but {} hashes to {}",
                trained.config_hash,
                config.display(),
                cfg.train.hash()
            );
            if !force {
                return Err(CoreError::Config(format!("{msg} (pass --force to proceed)")));
            }
            eprintln!("warning: {msg}");
        }
    }
    let seed = ens.seed.unwrap_or(cfg.sample.seed);
    let dir = ens
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("sample-{}-{}-s{}", cfg.train.system, cfg.train.mode, seed)));
    sample_policy(&dir, &cfg, &ckpt.params, &ens, "sample")?;
    Ok(())
}

#[derive(Serialize)]
struct BaselineSnapshot<'a> {
    system: &'a str,
    kind: &'a str,
    temperature: f64,
    paths: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    smd: Option<SmdArgs>,
}

pub fn baseline(root: &Path, system: &str, temp: Option<f64>, smd: Option<SmdArgs>, ens: Ensemble) -> Result<()> {
    let sys = SystemSpec::by_name(system)?;
    let temperature = temp.unwrap_or(sys.base_temperature);
    let m = ens.paths.unwrap_or(1024);
    let seed = ens.seed.unwrap_or(0);
    let kind = if smd.is_some() { "smd" } else { "umd" };
    let snap = BaselineSnapshot {
        system,
        kind,
        temperature,
        paths: m,
        seed,
        smd,
    };
    let label = match smd {
        Some(s) => format!("smd-{}-k{}-{:.0}K", system, s.k, temperature),
        None => format!("umd-{}-{:.0}K", system, temperature),
    };
    let dir = ens.out.clone().unwrap_or_else(|| root.join(format!("{label}-s{seed}")));
    if m == 0 {
        return Err(CoreError::EmptyEnsemble);
    }
    let paths = match smd {
        Some(s) => {
            let sched = SmdSchedule {
                k: s.k,
                anchor: s.anchor,
                restraint: s.restraint,
            };
            run_smd(&sys, &sched, temperature, m, seed)?
        }
        None => run_umd(&sys, temperature, m, seed)?,
    };
    let hash = config_hash(&snap);
    let text = toml::to_string(&snap).expect("snapshot serializes");
    write_provenance(&dir, &text, &meta(&format!("baseline {kind}"), seed, hash.clone()))?;
    let rm = ReportMeta {
        label,
        config_hash: hash,
        seed,
        version: VERSION.into(),
        ets_scan: EtsScan::FirstHit,
    };
    finish_ensemble(&dir, &sys, &paths, rm, ens.save_paths, None)?;
    Ok(())
}

#[derive(Serialize)]
struct OracleSnapshot<'a> {
    system: &'a str,
    budget: u64,
    seed: u64,
    temperature: f64,
    ets_scan: EtsScan,
}

pub fn oracle(root: &Path, system: &str, budget: u64, seed: u64, out: Option<PathBuf>, scan: EtsScan) -> Result<()> {
    let sys = SystemSpec::by_name(system)?;
    let snap = OracleSnapshot {
        system,
        budget,
        seed,
        temperature: sys.base_temperature,
        ets_scan: scan,
    };
    let dir = out.unwrap_or_else(|| root.join(format!("oracle-{system}-b{budget}-s{seed}")));
    let mut last = 0;
    let res = tps_core::eval::rejection_oracle_with(&sys, budget, seed, |done, acc| {
        if done >= last + budget / 10 || done == budget {
            eprintln!("oracle: {done}/{budget} proposals, {acc} accepted");
            last = done;
        }
    })?;
    let hash = config_hash(&snap);
    let text = toml::to_string(&snap).expect("snapshot serializes");
    write_provenance(&dir, &text, &meta("oracle", seed, hash.clone()))?;
    let rm = ReportMeta {
        label: "oracle".into(),
        config_hash: hash,
        seed,
        version: VERSION.into(),
        ets_scan: scan,
    };
    finish_ensemble(&dir, &sys, &res.accepted, rm, true, Some(res.acceptance_rate))?;
    println!("acceptance rate {:.4e} ({} / {budget})", res.acceptance_rate, res.accepted.len());
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    system: &'a str,
    paths: String,
    ets_scan: EtsScan,
}

pub fn eval(root: &Path, paths: &Path, system: &str, out: Option<PathBuf>, scan: EtsScan) -> Result<()> {
    let sys = SystemSpec::by_name(system)?;
    let ensemble = read_paths(paths)?;
    let name = paths.file_stem().map_or("paths".into(), |s| s.to_string_lossy().into_owned());
    let dir = out.unwrap_or_else(|| root.join(format!("eval-{name}")));
    let snap = EvalSnapshot {
        system,
        paths: paths.display().to_string(),
        ets_scan: scan,
    };
    let hash = config_hash(&ensemble.iter().map(|p| p.id).collect::<Vec<_>>());
    let text = toml::to_string(&snap).expect("snapshot serializes");
    write_provenance(&dir, &text, &meta("eval", 0, hash.clone()))?;
    let rm = ReportMeta {
        label: "eval".into(),
        config_hash: hash,
        seed: 0,
        version: VERSION.into(),
        ets_scan: scan,
    };
    finish_ensemble(&dir, &sys, &ensemble, rm, false, None)?;
    Ok(())
}

pub fn ablate(root: &Path, toggle: Ablation, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.train = toggle.apply(&cfg.train);
    cfg.train.validate()?;
    let dir = out.unwrap_or_else(|| {
        root.join(format!("ablate-{}-{}-{}-s{}", toggle.name(), cfg.train.system, cfg.train.mode, cfg.train.seed))
    });
    let trainer = run_training(&dir, &cfg, false, usize::MAX, None, &format!("ablate {}", toggle.name()))?;
    sample_policy(&dir.join("eval"), &cfg, &trainer.params, &Ensemble::default(), toggle.name())?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

pub fn field_dump(checkpoint: &Path, system: &str, x: [f64; 2], y: [f64; 2], resolution: usize, out: &Path) -> Result<()> {
    let sys = SystemSpec::by_name(system)?;
    if sys.dim() != 2 {
        return Err(CoreError::Config(format!("field-dump needs a planar system, {system} has {} coordinates", sys.dim())));
    }
    if resolution < 2 {
        return Err(CoreError::Config("--resolution must be at least 2".into()));
    }
    let params = read_checkpoint(checkpoint)?.params;
    params.check_system(&sys)?;
    let mut text = String::from(if params.mode == Mode::P { "x,y,b_x,b_y,potential\n" } else { "x,y,b_x,b_y\n" });
    let step = |r: [f64; 2], i: usize| r[0] + (r[1] - r[0]) * i as f64 / (resolution - 1) as f64;
    for j in 0..resolution {
        for i in 0..resolution {
            let p = [step(x, i), step(y, j)];
            let o = bias_force(&params, &sys, &p)?;
            text.push_str(&format!("{:e},{:e},{:e},{:e}", p[0], p[1], o.bias[0], o.bias[1]));
            if params.mode == Mode::P {
                text.push_str(&format!(",{:e}", potential(&params, &sys, &p)?));
            }
            text.push('\n');
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out, &text)
}
