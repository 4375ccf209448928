//! Ensemble metrics, transition states, reports and the rejection oracle.

use std::io::Write;
use std::path::Path as FsPath;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{rollout_batch, NoBias, Path, RolloutSpec};
use crate::error::{CoreError, Result};
use crate::geometry::aligned_rmsd;
use crate::io::write_json;
use crate::rng::ORACLE;
use crate::systems::SystemSpec;

pub const REPORT_SCHEMA: u32 = 1;
pub const HIST_BINS: usize = 50;
/// Paths simulated per oracle batch.
pub const ORACLE_BATCH: usize = 4096;

/// Distance of the final position from `R_B`: Euclidean for a single
/// particle, Kabsch-aligned RMSD otherwise.
pub fn rmsd_metric(sys: &SystemSpec, path: &Path) -> Result<f64> {
    position_rmsd(sys, path.final_positions())
}

pub fn position_rmsd(sys: &SystemSpec, r: &[f64]) -> Result<f64> {
    if r.len() != sys.dim() {
        return Err(CoreError::Dimension {
            expected: sys.dim(),
            got: r.len(),
        });
    }
    if sys.n_atoms == 1 {
        Ok(r.iter().zip(&sys.r_b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    } else {
        aligned_rmsd(r, &sys.r_b, sys.spatial_dim)
    }
}

pub fn hits(sys: &SystemSpec, path: &Path) -> bool {
    sys.in_target(path.final_positions())
}

/// Percentage of paths whose final position lies in the target set.
pub fn thp_metric(sys: &SystemSpec, paths: &[Path]) -> Result<f64> {
    if paths.is_empty() {
        return Err(CoreError::EmptyEnsemble);
    }
    let n = paths.iter().filter(|p| hits(sys, p)).count();
    Ok(100.0 * n as f64 / paths.len() as f64)
}

/// How far along a hitting path the energy maximum is searched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtsScan {
    /// Up to and including the first state inside the target.
    #[default]
    FirstHit,
    /// The whole path.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionState {
    pub path_id: u64,
    pub step: usize,
    pub position: Vec<f64>,
    pub energy: f64,
    /// Channel coordinate: `y` for a planar particle, the first CV otherwise.
    pub channel: f64,
}

pub fn first_hit(sys: &SystemSpec, path: &Path) -> Option<usize> {
    (0..=path.steps()).find(|&l| sys.in_target(path.positions(l)))
}

pub fn channel_coordinate(sys: &SystemSpec, r: &[f64]) -> f64 {
    if sys.n_atoms == 1 && sys.spatial_dim >= 2 {
        r[1]
    } else {
        sys.cv_value(r)[0]
    }
}

/// Highest-energy state of a hitting path.
pub fn ets_metric(sys: &SystemSpec, path: &Path, scan: EtsScan) -> Result<TransitionState> {
    if !hits(sys, path) {
        return Err(CoreError::NotHitting(path.id));
    }
    let end = match scan {
        EtsScan::FirstHit => first_hit(sys, path).unwrap_or(path.steps()),
        EtsScan::Full => path.steps(),
    };
    let (step, energy) = (0..=end)
        .map(|l| (l, sys.energy_unchecked(path.positions(l))))
        .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
    let position = path.positions(step).to_vec();
    Ok(TransitionState {
        path_id: path.id,
        step,
        channel: channel_coordinate(sys, &position),
        position,
        energy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation; `None` when empty.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCounts {
    pub positive: usize,
    pub negative: usize,
}

/// Provenance attached to every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub ets_scan: EtsScan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub system: String,
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub paths: usize,
    pub hitting: usize,
    pub thp: f64,
    pub rmsd: Vec<f64>,
    pub rmsd_summary: MeanStd,
    pub ets: Vec<f64>,
    pub ets_summary: Option<MeanStd>,
    pub transition_states: Vec<TransitionState>,
    pub channels: ChannelCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
}

pub fn report(sys: &SystemSpec, paths: &[Path], meta: ReportMeta) -> Result<RunReport> {
    if paths.is_empty() {
        return Err(CoreError::EmptyEnsemble);
    }
    let rmsd = paths.par_iter().map(|p| rmsd_metric(sys, p)).collect::<Result<Vec<_>>>()?;
    let transition_states: Vec<TransitionState> = paths
        .par_iter()
        .filter(|p| hits(sys, p))
        .map(|p| ets_metric(sys, p, meta.ets_scan))
        .collect::<Result<_>>()?;
    let ets: Vec<f64> = transition_states.iter().map(|t| t.energy).collect();
    let positive = transition_states.iter().filter(|t| t.channel >= 0.0).count();
    Ok(RunReport {
        schema_version: REPORT_SCHEMA,
        system: sys.name.clone(),
        meta,
        paths: paths.len(),
        hitting: ets.len(),
        thp: 100.0 * ets.len() as f64 / paths.len() as f64,
        rmsd_summary: MeanStd::of(&rmsd).expect("nonempty"),
        rmsd,
        ets_summary: MeanStd::of(&ets),
        ets,
        channels: ChannelCounts {
            positive,
            negative: transition_states.len() - positive,
        },
        transition_states,
        acceptance_rate: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Uniform bins over the data range; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|i| HistBin {
            left: lo + i as f64 * width,
            right: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

pub fn write_histogram_csv(w: &mut impl Write, bins: &[HistBin]) -> std::io::Result<()> {
    writeln!(w, "bin_left,bin_right,count")?;
    for b in bins {
        writeln!(w, "{:e},{:e},{}", b.left, b.right, b.count)?;
    }
    Ok(())
}

/// Write `report.json`, `ts_energy_hist.csv` and `ts_channel_hist.csv` into `dir`.
pub fn write_report(dir: &FsPath, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    write_json(&dir.join("report.json"), report)?;
    let channel: Vec<f64> = report.transition_states.iter().map(|t| t.channel).collect();
    for (name, values) in [("ts_energy_hist.csv", &report.ets), ("ts_channel_hist.csv", &channel)] {
        let path = dir.join(name);
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?);
        write_histogram_csv(&mut f, &histogram(values, HIST_BINS))
            .and_then(|_| f.flush())
            .map_err(|e| CoreError::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub accepted: Vec<Path>,
    pub proposals: u64,
    pub acceptance_rate: f64,
}

/// Unbiased proposals at the base temperature, keeping those that end in the target.
pub fn rejection_oracle(sys: &SystemSpec, budget: u64, seed: u64) -> Result<OracleResult> {
    rejection_oracle_with(sys, budget, seed, |_, _| {})
}

/// As [`rejection_oracle`], calling `progress(proposed, accepted)` after each batch.
pub fn rejection_oracle_with(
    sys: &SystemSpec,
    budget: u64,
    seed: u64,
    mut progress: impl FnMut(u64, usize),
) -> Result<OracleResult> {
    if budget == 0 {
        return Err(CoreError::Invalid("proposal budget must be at least 1".into()));
    }
    let spec = RolloutSpec::new(sys.horizon, sys.base_temperature, seed, 0).with_stream(ORACLE);
    let mut accepted = Vec::new();
    let mut done = 0u64;
    while done < budget {
        let count = (budget - done).min(ORACLE_BATCH as u64) as usize;
        let batch = rollout_batch(sys, &NoBias, &spec, done, count)?;
        accepted.extend(batch.into_iter().filter(|p| hits(sys, p)));
        done += count as u64;
        progress(done, accepted.len());
    }
    if accepted.is_empty() {
        return Err(CoreError::NoAcceptance {
            budget,
            upper_bound: 3.0 / budget as f64,
        });
    }
    Ok(OracleResult {
        acceptance_rate: accepted.len() as f64 / budget as f64,
        accepted,
        proposals: budget,
    })
}

/// 1-Wasserstein distance between two empirical distributions on the line.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::EmptyEnsemble);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
    }
    Ok(total)
}
