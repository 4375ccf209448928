use tps_core::baselines::run_umd;
use tps_core::dynamics::Path;
use tps_core::eval::{
    ets_metric, first_hit, histogram, rejection_oracle, report, rmsd_metric, thp_metric, wasserstein1, write_report,
    EtsScan, MeanStd, ReportMeta, RunReport, HIST_BINS,
};
use tps_core::geometry::RigidTransform;
use tps_core::io::read_json;
use tps_core::systems::{double_well_grid, find_critical_points, PointKind, SystemSpec};
use tps_core::CoreError;

/// Deterministic path through the given planar positions.
fn planar_path(id: u64, pts: &[[f64; 2]]) -> Path {
    let steps = pts.len() - 1;
    Path {
        id,
        state_dim: 2,
        noise_dim: 2,
        states: pts.iter().flatten().copied().collect(),
        noises: vec![0.0; 2 * steps],
        policy_values: vec![0.0; 2 * steps],
        gen_temperature: 1200.0,
        log_p0: 0.0,
        log_indicator: 0.0,
        truncation: steps,
    }
}

fn ends(sys: &SystemSpec) -> ([f64; 2], [f64; 2]) {
    ([sys.r_a[0], sys.r_a[1]], [sys.r_b[0], sys.r_b[1]])
}

#[test]
fn rmsd_at_endpoints() {
    let sys = SystemSpec::double_well().unwrap();
    let (a, b) = ends(&sys);
    assert_eq!(rmsd_metric(&sys, &planar_path(0, &[a, b])).unwrap(), 0.0);
    let minima: Vec<_> = find_critical_points(&sys, &double_well_grid())
        .unwrap()
        .into_iter()
        .filter(|p| p.kind == PointKind::Minimum)
        .collect();
    let d = ((minima[0].position[0] - minima[1].position[0]).powi(2)
        + (minima[0].position[1] - minima[1].position[1]).powi(2))
    .sqrt();
    assert!((rmsd_metric(&sys, &planar_path(0, &[a, a])).unwrap() - d).abs() < 1e-9);
}

#[test]
fn chain_rmsd_is_rigid_invariant() {
    let sys = SystemSpec::chain4().unwrap();
    let mut p = run_umd(&sys, 300.0, 1, 2).unwrap().remove(0);
    let before = rmsd_metric(&sys, &p).unwrap();
    let t = RigidTransform::identity(3);
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let rot = RigidTransform {
        rotation: vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0],
        translation: vec![1.0, -2.0, 0.5],
        ..t
    };
    let n = p.states.len() - p.state_dim;
    let moved = rot.apply(p.final_positions());
    p.states[n..n + moved.len()].copy_from_slice(&moved);
    assert!((rmsd_metric(&sys, &p).unwrap() - before).abs() < 1e-9);
}

#[test]
fn thp_extremes() {
    let sys = SystemSpec::double_well().unwrap();
    let (a, b) = ends(&sys);
    let hit: Vec<Path> = (0..4).map(|i| planar_path(i, &[a, b])).collect();
    let miss: Vec<Path> = (0..4).map(|i| planar_path(i, &[a, a])).collect();
    assert_eq!(thp_metric(&sys, &hit).unwrap(), 100.0);
    assert_eq!(thp_metric(&sys, &miss).unwrap(), 0.0);
    assert!(matches!(thp_metric(&sys, &[]), Err(CoreError::EmptyEnsemble)));
}

#[test]
fn umd_thp_at_3600k() {
    let sys = SystemSpec::double_well().unwrap();
    let paths = run_umd(&sys, 3600.0, 1024, 0).unwrap();
    let thp = thp_metric(&sys, &paths).unwrap();
    assert!((thp - 12.6).abs() <= 6.0, "{thp}");
}

#[test]
fn ets_on_constructed_path() {
    let sys = SystemSpec::double_well().unwrap();
    let (a, b) = ends(&sys);
    let mid = [0.0, 0.0];
    let p = planar_path(7, &[a, mid, b]);
    let ts = ets_metric(&sys, &p, EtsScan::FirstHit).unwrap();
    assert_eq!(ts.step, 1);
    assert_eq!(ts.energy, sys.energy(&mid).unwrap());
    assert_eq!(ts.path_id, 7);
    assert!(matches!(
        ets_metric(&sys, &planar_path(3, &[a, mid, a]), EtsScan::FirstHit),
        Err(CoreError::NotHitting(3))
    ));
}

#[test]
fn ets_ignores_excursions_after_first_hit() {
    let sys = SystemSpec::double_well().unwrap();
    let (a, b) = ends(&sys);
    let mid = [0.0, 0.5];
    let high = [0.0, 2.0];
    let short = planar_path(0, &[a, mid, b]);
    let long = planar_path(0, &[a, mid, b, high, b]);
    assert_eq!(first_hit(&sys, &long), Some(2));
    assert_eq!(
        ets_metric(&sys, &short, EtsScan::FirstHit).unwrap(),
        ets_metric(&sys, &long, EtsScan::FirstHit).unwrap()
    );
    let full = ets_metric(&sys, &long, EtsScan::Full).unwrap();
    assert_eq!(full.step, 3);
}

#[test]
fn degenerate_report_and_files() {
    let sys = SystemSpec::double_well().unwrap();
    let (a, b) = ends(&sys);
    let p = planar_path(0, &[a, [0.0, -0.3], b]);
    let meta = ReportMeta {
        label: "unit".into(),
        config_hash: "abc".into(),
        seed: 9,
        version: "test".into(),
        ets_scan: EtsScan::FirstHit,
    };
    let rep = report(&sys, &[p], meta).unwrap();
    assert_eq!(rep.thp, 100.0);
    assert_eq!(rep.rmsd, vec![0.0]);
    assert_eq!(rep.ets, vec![sys.energy(&[0.0, -0.3]).unwrap()]);
    assert_eq!((rep.channels.positive, rep.channels.negative), (0, 1));
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &rep).unwrap();
    let back: RunReport = read_json(&dir.path().join("report.json")).unwrap();
    assert_eq!(back, rep);
    let csv = std::fs::read_to_string(dir.path().join("ts_energy_hist.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "bin_left,bin_right,count");
    assert_eq!(csv.lines().count(), HIST_BINS + 1);
    assert!(matches!(report(&sys, &[], ReportMeta::default()), Err(CoreError::EmptyEnsemble)));
}

#[test]
fn report_is_permutation_invariant() {
    let sys = SystemSpec::double_well().unwrap();
    let mut paths = run_umd(&sys, 3600.0, 256, 4).unwrap();
    let a = report(&sys, &paths, ReportMeta::default()).unwrap();
    paths.reverse();
    let b = report(&sys, &paths, ReportMeta::default()).unwrap();
    assert_eq!(a.thp, b.thp);
    assert!((a.rmsd_summary.mean - b.rmsd_summary.mean).abs() < 1e-12);
    let (ea, eb) = (a.ets_summary.unwrap(), b.ets_summary.unwrap());
    assert!((ea.mean - eb.mean).abs() < 1e-12 && (ea.std - eb.std).abs() < 1e-12);
    assert_eq!(a.channels, b.channels);
    assert_eq!(a.hitting, a.ets.len());
    assert_eq!(a.channels.positive + a.channels.negative, a.hitting);
}

#[test]
fn histogram_conserves_counts() {
    let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.13 - 2.0).collect();
    let h = histogram(&xs, HIST_BINS);
    assert_eq!(h.len(), HIST_BINS);
    assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), xs.len());
    assert_eq!(h[0].left, -2.0);
    assert_eq!(h[HIST_BINS - 1].right, 100.0 * 0.13 - 2.0);
    let flat = histogram(&[1.0; 5], 10);
    assert_eq!(flat.iter().map(|b| b.count).sum::<usize>(), 5);
    assert!(histogram(&[], 10).is_empty());
}

#[test]
fn mean_std_is_population() {
    let s = MeanStd::of(&[1.0, 3.0]).unwrap();
    assert_eq!((s.mean, s.std), (2.0, 1.0));
    assert!(MeanStd::of(&[]).is_none());
}

#[test]
fn wasserstein_matches_sorted_difference() {
    let a = [0.3, -1.0, 2.5, 0.0];
    let b = [1.0, 0.1, -0.2, 4.0];
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let direct: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0;
    assert!((wasserstein1(&a, &b).unwrap() - direct).abs() < 1e-12);
    assert!((wasserstein1(&[0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
}

#[test]
fn oracle_accepts_only_hitting_paths() {
    let sys = SystemSpec::double_well().unwrap();
    let hot = SystemSpec {
        base_temperature: 3600.0,
        ..sys.clone()
    };
    let res = rejection_oracle(&hot, 2000, 0).unwrap();
    assert!(!res.accepted.is_empty());
    assert!(res.accepted.iter().all(|p| hot.in_target(p.final_positions())));
    assert_eq!(res.acceptance_rate, res.accepted.len() as f64 / 2000.0);
    match rejection_oracle(&sys, 10, 0) {
        Err(CoreError::NoAcceptance { budget, upper_bound }) => {
            assert_eq!(budget, 10);
            assert!((upper_bound - 0.3).abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
    assert!(rejection_oracle(&sys, 0, 0).is_err());
}
