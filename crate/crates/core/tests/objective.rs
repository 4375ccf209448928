use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tps_core::dynamics::{rollout_batch, NoBias, Path, RolloutSpec};
use tps_core::objective::{
    annotate, f_hat, indicator, kl_loss, log_path_density, loss, ControlVariate, IndicatorKind,
    IndicatorSpec, ReplayBuffer,
};
use tps_core::policy::{Mode, PolicyParams};
use tps_core::systems::SystemSpec;

fn random_policy(sys: &SystemSpec, mode: Mode, scale: f64, seed: u64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PolicyParams::init(sys, mode, &[16, 16], true, &mut rng);
    let flat: Vec<f64> = p.net.flatten().iter().map(|_| rng.random_range(-scale..scale)).collect();
    p.net.set_flat(&flat);
    p
}

/// F-mode policy whose output is the constant `c` everywhere.
fn constant_policy(sys: &SystemSpec, c: &[f64]) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = PolicyParams::init(sys, Mode::F, &[4], false, &mut rng);
    let mut flat = vec![0.0; p.net.n_params()];
    let nb = c.len();
    let len = flat.len();
    flat[len - nb..].copy_from_slice(c);
    p.net.set_flat(&flat);
    p
}

fn paths(sys: &SystemSpec, field: &PolicyParams, spec: &IndicatorSpec, steps: usize, temp: f64, count: usize, seed: u64) -> Vec<Path> {
    let mut out = rollout_batch(sys, field, &RolloutSpec::new(steps, temp, seed, 0), 0, count).unwrap();
    for p in out.iter_mut() {
        annotate(spec, sys, p);
    }
    out
}

fn straight_path(sys: &SystemSpec, ends: &[f64]) -> Path {
    let n = sys.dim();
    let steps = 4;
    let mut states = Vec::new();
    for l in 0..=steps {
        let t = l as f64 / steps as f64;
        states.extend(sys.r_a.iter().zip(ends).map(|(a, b)| a + t * (b - a)));
    }
    Path {
        id: 0,
        state_dim: n,
        noise_dim: n,
        states,
        noises: vec![0.0; steps * n],
        policy_values: vec![0.0; steps * n],
        gen_temperature: sys.base_temperature,
        log_p0: 0.0,
        log_indicator: 0.0,
        truncation: steps,
    }
}

#[test]
fn indicator_values() {
    let sys = SystemSpec::double_well().unwrap();
    let rbf = IndicatorSpec::new(IndicatorKind::RbfFinal, 3.0).unwrap();
    let at_target = straight_path(&sys, &sys.r_b);
    assert_eq!(indicator(&rbf, &sys, &at_target), (0.0, 4));
    let far: Vec<f64> = vec![sys.r_b[0], sys.r_b[1] + 3.0];
    let (v, _) = indicator(&rbf, &sys, &straight_path(&sys, &far));
    assert!((v + 0.5).abs() < 1e-12);
    let hard = IndicatorSpec::new(IndicatorKind::Hard, 3.0).unwrap();
    assert_eq!(indicator(&hard, &sys, &at_target).0, 0.0);
    assert_eq!(indicator(&hard, &sys, &straight_path(&sys, &far)).0, -1e6);
    assert!(IndicatorSpec::new(IndicatorKind::RbfMax, 0.0).is_err());
}

#[test]
fn max_relaxation_dominates_final_state() {
    let sys = SystemSpec::double_well().unwrap();
    let pol = random_policy(&sys, Mode::F, 0.5, 1);
    let fin = IndicatorSpec::new(IndicatorKind::RbfFinal, 0.5).unwrap();
    let max = IndicatorSpec::new(IndicatorKind::RbfMax, 0.5).unwrap();
    for p in paths(&sys, &pol, &fin, 100, 2400.0, 64, 2) {
        let (a, la) = indicator(&fin, &sys, &p);
        let (b, lb) = indicator(&max, &sys, &p);
        assert!(b >= a && b <= 0.0);
        assert_eq!(la, 100);
        assert!(lb <= 100);
    }
}

#[test]
fn one_step_density_matches_gaussian_pdf() {
    let sys = SystemSpec::double_well().unwrap();
    let fin = IndicatorSpec::new(IndicatorKind::RbfFinal, 1.0).unwrap();
    let zero = PolicyParams::init(&sys, Mode::F, &[8], true, &mut ChaCha8Rng::seed_from_u64(3));
    let p = &paths(&sys, &zero, &fin, 1, 1200.0, 1, 3)[0];
    let x0 = p.state(0);
    let x1 = p.state(1);
    let f = sys.force(x0).unwrap();
    let var = 2.0 * sys.friction * sys.boltzmann * sys.base_temperature * sys.dt;
    let oracle: f64 = (0..2)
        .map(|k| {
            let mu = x0[k] + f[k] * sys.dt;
            -(x1[k] - mu).powi(2) / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
        })
        .sum();
    assert!((log_path_density(&sys, p, None).unwrap() - oracle).abs() < 1e-10);
    assert_eq!(log_path_density(&sys, p, Some(&zero)).unwrap(), log_path_density(&sys, p, None).unwrap());
}

#[test]
fn constant_bias_shifts_density_by_girsanov_increment() {
    let sys = SystemSpec::double_well().unwrap();
    let c = [0.7, -0.4];
    let pol = constant_policy(&sys, &c);
    let fin = IndicatorSpec::new(IndicatorKind::RbfFinal, 1.0).unwrap();
    let p = &paths(&sys, &pol, &fin, 1, 1200.0, 1, 4)[0];
    let s = (2.0 * sys.friction * sys.boltzmann * sys.base_temperature).sqrt();
    let f = sys.force(p.state(0)).unwrap();
    let mut expect = 0.0;
    for k in 0..2 {
        let v = c[k] / s;
        let z = (p.state(1)[k] - p.state(0)[k] - f[k] * sys.dt) / s;
        expect += v * z - 0.5 * v * v * sys.dt;
    }
    let got = log_path_density(&sys, p, Some(&pol)).unwrap() - log_path_density(&sys, p, None).unwrap();
    assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
}

#[test]
fn discretized_value_equals_density_ratio() {
    let sys = SystemSpec::double_well().unwrap();
    let ch = SystemSpec::chain4().unwrap();
    let spec = IndicatorSpec::new(IndicatorKind::RbfMax, 1.0).unwrap();
    for (sys, mode) in [(&sys, Mode::F), (&sys, Mode::P), (&sys, Mode::S), (&ch, Mode::S)] {
        let gen = random_policy(sys, mode, 0.3, 5);
        let other = random_policy(sys, mode, 0.3, 6);
        for temp in [sys.base_temperature, 2.0 * sys.base_temperature] {
            for p in paths(sys, &gen, &spec, 20, temp, 16, 7) {
                for theta in [&gen, &other] {
                    let lhs = f_hat(sys, &p, theta).unwrap() - p.log_indicator;
                    let rhs = p.log_p0 - log_path_density(sys, &p, Some(theta)).unwrap();
                    assert!((lhs - rhs).abs() < 1e-8, "{mode} {temp}: {lhs} vs {rhs}");
                }
            }
        }
    }
}

#[test]
fn zero_policy_value_is_log_indicator() {
    let sys = SystemSpec::double_well().unwrap();
    let zero = PolicyParams::init(&sys, Mode::P, &[8], true, &mut ChaCha8Rng::seed_from_u64(8));
    let spec = IndicatorSpec::new(IndicatorKind::RbfMax, 0.5).unwrap();
    for p in paths(&sys, &random_policy(&sys, Mode::F, 0.5, 9), &spec, 30, 1200.0, 8, 9) {
        assert_eq!(f_hat(&sys, &p, &zero).unwrap(), p.log_indicator);
    }
}

#[test]
fn on_policy_mean_matches_ito_expectation_for_constant_control() {
    let sys = SystemSpec::harmonic1d(0.0);
    let c = [0.05];
    let pol = constant_policy(&sys, &c);
    let spec = IndicatorSpec::new(IndicatorKind::RbfFinal, 1.0).unwrap();
    let steps = 10;
    let ps = paths(&sys, &pol, &spec, steps, sys.base_temperature, 10_000, 10);
    let vals: Vec<f64> = ps.iter().map(|p| f_hat(&sys, p, &pol).unwrap() - p.log_indicator).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let v = c[0] / (2.0 * sys.friction * sys.boltzmann * sys.base_temperature).sqrt();
    let expect = -0.5 * v * v * steps as f64 * sys.dt;
    assert!(expect < 0.0);
    assert!((mean - expect).abs() < 3.0 * sd / n.sqrt(), "{mean} vs {expect}");
}

#[test]
fn loss_vanishes_and_optimal_w_is_mean_log_ratio() {
    let sys = SystemSpec::double_well().unwrap();
    let zero = PolicyParams::init(&sys, Mode::F, &[8], true, &mut ChaCha8Rng::seed_from_u64(11));
    let spec = IndicatorSpec::new(IndicatorKind::RbfMax, 1.0).unwrap();
    let ps = paths(&sys, &random_policy(&sys, Mode::F, 0.4, 12), &spec, 25, 2400.0, 12, 12);
    let single = loss(&sys, &[&ps[0]], &zero, ps[0].log_indicator, ControlVariate::Learned).unwrap();
    assert!(single.loss.abs() < 1e-24);
    let pol = random_policy(&sys, Mode::F, 0.4, 13);
    let batch: Vec<&Path> = ps.iter().collect();
    let base = loss(&sys, &batch, &pol, 0.0, ControlVariate::Learned).unwrap();
    let mean = base.log_ratios.iter().sum::<f64>() / batch.len() as f64;
    let at = |w: f64| loss(&sys, &batch, &pol, w, ControlVariate::Learned).unwrap();
    let best = at(mean);
    assert!(best.grad_w.abs() < 1e-10);
    for dw in [-1.0, -0.1, -1e-3, 1e-3, 0.1, 1.0] {
        assert!(at(mean + dw).loss > best.loss);
    }
    let h = 1e-6;
    let fd = (at(0.3 + h).loss - at(0.3 - h).loss) / (2.0 * h);
    assert!((at(0.3).grad_w - fd).abs() < 1e-6 * fd.abs().max(1.0));
    let local = loss(&sys, &batch, &pol, 123.0, ControlVariate::Local).unwrap();
    assert_eq!(local.grad_w, 0.0);
    assert!((local.loss - best.loss).abs() < 1e-12 * best.loss.max(1.0));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let sys = SystemSpec::double_well().unwrap();
    let ch = SystemSpec::chain4().unwrap();
    let spec = IndicatorSpec::new(IndicatorKind::RbfMax, 0.8).unwrap();
    for (sys, mode, tol) in [(&sys, Mode::F, 1e-4), (&sys, Mode::S, 1e-4), (&sys, Mode::P, 1e-3), (&ch, Mode::F, 1e-4), (&ch, Mode::P, 1e-3)] {
        let gen = random_policy(sys, mode, 0.3, 14);
        let ps = paths(sys, &gen, &spec, 5, 1.5 * sys.base_temperature, 3, 15);
        let batch: Vec<&Path> = ps.iter().collect();
        let theta = random_policy(sys, mode, 0.3, 16);
        for cv in [ControlVariate::Learned, ControlVariate::Local] {
            let lv = loss(sys, &batch, &theta, 0.2, cv).unwrap();
            let flat = theta.net.flatten();
            let h = 1e-6;
            let mut checked = 0;
            for i in (0..flat.len()).step_by(5) {
                let eval = |d: f64| {
                    let mut p = theta.clone();
                    let mut f = flat.clone();
                    f[i] += d;
                    p.net.set_flat(&f);
                    loss(sys, &batch, &p, 0.2, cv).unwrap().loss
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                if fd.abs() < 1e-6 {
                    continue;
                }
                checked += 1;
                let rel = (lv.grad_theta[i] - fd).abs() / fd.abs();
                assert!(rel < tol, "{mode} {cv:?} θ[{i}]: {} vs {fd}", lv.grad_theta[i]);
            }
            assert!(checked > 10);
        }
    }
}

#[test]
fn kl_gradient_matches_finite_differences_with_shared_noise() {
    let sys = SystemSpec::double_well().unwrap();
    let spec = IndicatorSpec::new(IndicatorKind::RbfFinal, 0.8).unwrap();
    for mode in [Mode::F, Mode::P, Mode::S] {
        let theta = random_policy(&sys, mode, 0.3, 17);
        let objective = |p: &PolicyParams| {
            let ps = paths(&sys, p, &spec, 8, sys.base_temperature, 4, 18);
            let batch: Vec<&Path> = ps.iter().collect();
            kl_loss(&sys, &batch, p, &spec).unwrap()
        };
        let kv = objective(&theta);
        let flat = theta.net.flatten();
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..flat.len()).step_by(3) {
            let eval = |d: f64| {
                let mut p = theta.clone();
                let mut f = flat.clone();
                f[i] += d;
                p.net.set_flat(&f);
                objective(&p).loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            if fd.abs() < 1e-6 {
                continue;
            }
            checked += 1;
            assert!((kv.grad_theta[i] - fd).abs() < 1e-4 * fd.abs() + 1e-8, "{mode} θ[{i}]: {} vs {fd}", kv.grad_theta[i]);
        }
        assert!(checked > 10);
    }
}

#[test]
fn on_policy_log_variance_gradient_is_twice_kl_gradient() {
    let sys = SystemSpec::harmonic1d(1.0);
    let spec = IndicatorSpec::new(IndicatorKind::RbfFinal, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut theta = PolicyParams::init(&sys, Mode::F, &[8], false, &mut rng);
    let flat: Vec<f64> = theta.net.flatten().iter().map(|_| rng.random_range(-0.1..0.1)).collect();
    theta.net.set_flat(&flat);
    let ps = paths(&sys, &theta, &spec, 10, sys.base_temperature, 10_000, 20);
    let w = ps.iter().map(|p| f_hat(&sys, p, &theta).unwrap()).sum::<f64>() / ps.len() as f64;
    let dirs: Vec<Vec<f64>> = (0..3)
        .map(|_| flat.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut diffs = vec![Vec::new(); dirs.len()];
    for p in &ps {
        let lv = loss(&sys, &[p], &theta, w, ControlVariate::Learned).unwrap();
        let kl = kl_loss(&sys, &[p], &theta, &spec).unwrap();
        for (d, out) in dirs.iter().zip(diffs.iter_mut()) {
            out.push(
                d.iter()
                    .zip(lv.grad_theta.iter().zip(&kl.grad_theta))
                    .map(|(u, (a, b))| u * (0.5 * a - b))
                    .sum::<f64>(),
            );
        }
    }
    for d in diffs {
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let se = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "{mean} vs se {se}");
    }
}

#[test]
fn kl_rejects_underdamped_systems() {
    let mut sys = SystemSpec::double_well().unwrap();
    let spec = IndicatorSpec::new(IndicatorKind::RbfFinal, 0.8).unwrap();
    let pol = random_policy(&sys, Mode::F, 0.3, 21);
    let p = paths(&sys, &pol, &spec, 3, 1200.0, 1, 21);
    sys.integrator = tps_core::systems::Integrator::Underdamped;
    assert!(kl_loss(&sys, &[&p[0]], &pol, &spec).is_err());
}

#[test]
fn buffer_is_fifo_and_samples_without_replacement() {
    let sys = SystemSpec::harmonic1d(1.0);
    let all = rollout_batch(&sys, &NoBias, &RolloutSpec::new(2, 1200.0, 22, 0), 0, 10).unwrap();
    let mut buf = ReplayBuffer::new(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    assert!(buf.sample(1, &mut rng).is_err());
    buf.push(all[..5].iter().cloned());
    let ids: Vec<u64> = buf.iter().map(|p| p.id).collect();
    assert_eq!(ids, vec![2, 3, 4]);
    assert_eq!(buf.inserted, 5);
    let mut drawn: Vec<u64> = buf.sample(3, &mut rng).unwrap().iter().map(|p| p.id).collect();
    drawn.sort();
    assert_eq!(drawn, vec![2, 3, 4]);
    assert!(buf.sample(4, &mut rng).is_err());

    let dir = tempfile::tempdir().unwrap();
    buf.save(dir.path()).unwrap();
    let back = ReplayBuffer::load(dir.path()).unwrap();
    assert_eq!(back.inserted, 5);
    assert_eq!(back.iter().cloned().collect::<Vec<_>>(), buf.iter().cloned().collect::<Vec<_>>());
}

#[test]
fn buffer_sampling_is_uniform() {
    let sys = SystemSpec::harmonic1d(1.0);
    let all = rollout_batch(&sys, &NoBias, &RolloutSpec::new(1, 1200.0, 24, 0), 0, 10).unwrap();
    let mut buf = ReplayBuffer::new(10).unwrap();
    buf.push(all);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let draws = 100_000;
    let k = 3;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        for p in buf.sample(k, &mut rng).unwrap() {
            counts[p.id as usize] += 1;
        }
    }
    let pr = k as f64 / 10.0;
    let mean = draws as f64 * pr;
    let sd = (draws as f64 * pr * (1.0 - pr)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() < 3.0 * sd, "{c} vs {mean}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn normalizer_absorbs_constant_shift(c in -50.0f64..50.0, w in -5.0f64..5.0, seed in 0u64..1000) {
        let sys = SystemSpec::double_well().unwrap();
        let spec = IndicatorSpec::new(IndicatorKind::RbfMax, 1.0).unwrap();
        let pol = random_policy(&sys, Mode::F, 0.3, seed);
        let ps = paths(&sys, &pol, &spec, 10, 1200.0, 4, seed);
        let via_density = |shift: f64| -> f64 {
            ps.iter()
                .map(|p| {
                    let r = p.log_p0 + shift + p.log_indicator - log_path_density(&sys, p, Some(&pol)).unwrap() - (w + shift);
                    r * r
                })
                .sum::<f64>() / ps.len() as f64
        };
        let a = via_density(0.0);
        let b = via_density(c);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        let batch: Vec<&Path> = ps.iter().collect();
        let direct = loss(&sys, &batch, &pol, w, ControlVariate::Learned).unwrap().loss;
        prop_assert!((direct - a).abs() <= 1e-7 * a.max(1.0));
    }
}
