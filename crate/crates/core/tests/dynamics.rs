use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tps_core::dynamics::{
    drift, recover_noise, rollout_batch, step, step_with_noise, NoBias, Path, RolloutSpec,
};
use tps_core::policy::{Mode, PolicyParams};
use tps_core::systems::{Integrator, SystemSpec};

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn random_policy(sys: &SystemSpec, mode: Mode, seed: u64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PolicyParams::init(sys, mode, &[32, 32], true, &mut rng);
    let flat: Vec<f64> = p.net.flatten().iter().map(|_| rng.random_range(-0.3..0.3)).collect();
    p.net.set_flat(&flat);
    p
}

#[test]
fn free_particle_increment_variance() {
    let sys = SystemSpec::harmonic1d(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let incs: Vec<f64> = (0..n)
        .map(|_| step(&sys, &[0.0], &[0.0], sys.base_temperature, &mut rng).unwrap().0[0])
        .collect();
    let expect = 2.0 * sys.friction * sys.boltzmann * sys.base_temperature * sys.dt / sys.masses[0];
    let se = expect * (2.0 / (n as f64 - 1.0)).sqrt();
    assert!((sample_variance(&incs) - expect).abs() < 3.0 * se);
}

#[test]
fn noise_free_step_is_gradient_descent() {
    let sys = SystemSpec::double_well().unwrap();
    let x = [0.3, -0.7];
    let next = step_with_noise(&sys, &x, &[0.0, 0.0], 1200.0, &[0.0, 0.0]).unwrap();
    let f = sys.force(&x).unwrap();
    for k in 0..2 {
        assert!((next[k] - (x[k] + f[k] * sys.dt)).abs() < 1e-15);
    }
}

#[test]
fn drift_examples() {
    let free = SystemSpec::harmonic1d(0.0);
    assert_eq!(drift(&free, &[2.0], &[0.0]).unwrap(), vec![0.0]);
    let mut ud = SystemSpec::double_well().unwrap();
    ud.integrator = Integrator::Underdamped;
    let r = [0.4, 0.9];
    let d = drift(&ud, &[r[0], r[1], 0.0, 0.0], &[0.0, 0.0]).unwrap();
    let f = ud.force(&r).unwrap();
    assert_eq!(&d[..2], &[0.0, 0.0]);
    for k in 0..2 {
        assert!((d[2 + k] - f[k] / ud.masses[k]).abs() < 1e-14);
    }
}

#[test]
fn stored_noise_round_trips() {
    let dw = SystemSpec::double_well().unwrap();
    let mut ch = SystemSpec::chain4().unwrap();
    ch.integrator = Integrator::Underdamped;
    for (sys, mode) in [(&dw, Mode::F), (&dw, Mode::P), (&ch, Mode::S)] {
        let p = random_policy(sys, mode, 2);
        for temp in [sys.base_temperature, 2.0 * sys.base_temperature] {
            let paths = rollout_batch(sys, &p, &RolloutSpec::new(30, temp, 3, 0), 0, 4).unwrap();
            for path in &paths {
                for l in 0..path.steps() {
                    let eps = recover_noise(sys, path.state(l), path.state(l + 1), path.value(l), temp);
                    for (a, b) in eps.iter().zip(path.noise(l)) {
                        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                    }
                }
            }
        }
    }
}

#[test]
fn harmonic_well_equilibrates_to_boltzmann_variance() {
    let k = 1.0;
    let sys = SystemSpec::harmonic1d(k);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let burn = 600;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = vec![0.0];
        for _ in 0..burn {
            x = step(&sys, &x, &[0.0], sys.base_temperature, &mut rng).unwrap().0;
        }
        samples.push(x[0]);
    }
    let expect = sys.boltzmann * sys.base_temperature / k;
    let se = expect * (2.0 / (n as f64 - 1.0)).sqrt();
    let var = sample_variance(&samples);
    assert!((var - expect).abs() < 3.0 * se, "{var} vs {expect}");
}

#[test]
fn zero_policy_matches_unbiased_dynamics_exactly() {
    let sys = SystemSpec::double_well().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = PolicyParams::init(&sys, Mode::F, &[16, 16], true, &mut rng);
    let spec = RolloutSpec::new(50, 1200.0, 6, 0);
    let a = rollout_batch(&sys, &p, &spec, 0, 8).unwrap();
    let b = rollout_batch(&sys, &NoBias, &spec, 0, 8).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rollouts_are_reproducible_across_thread_counts() {
    let sys = SystemSpec::double_well().unwrap();
    let p = random_policy(&sys, Mode::F, 7);
    let spec = RolloutSpec::new(40, 2400.0, 8, 3);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| rollout_batch(&sys, &p, &spec, 10, 150).unwrap());
    let b = four.install(|| rollout_batch(&sys, &p, &spec, 10, 150).unwrap());
    assert_eq!(a, b);
    let c = rollout_batch(&sys, &p, &RolloutSpec::new(40, 2400.0, 9, 3), 10, 150).unwrap();
    assert_ne!(a[0].noises, c[0].noises);
    assert_ne!(a[0].noises, a[1].noises);
    // A path's stream depends only on its id, not its position in the batch.
    let single = rollout_batch(&sys, &p, &spec, 77, 1).unwrap();
    assert_eq!(single[0], a[67]);
}

fn hit_fraction(temp: f64) -> f64 {
    let sys = SystemSpec::double_well().unwrap();
    let paths = rollout_batch(&sys, &NoBias, &RolloutSpec::new(sys.horizon, temp, 11, 0), 0, 1024).unwrap();
    paths.iter().filter(|p| sys.in_target(p.final_positions())).count() as f64 / 1024.0
}

#[test]
fn unbiased_hit_fraction_at_base_temperature() {
    assert_eq!(hit_fraction(1200.0), 0.0);
}

#[test]
fn unbiased_hit_fraction_at_high_temperature() {
    let thp = 100.0 * hit_fraction(4800.0);
    assert!((thp - 21.58).abs() <= 10.0, "THP {thp}");
}

#[test]
fn binary_and_csv_round_trip() {
    let sys = SystemSpec::double_well().unwrap();
    let mut path = rollout_batch(&sys, &random_policy(&sys, Mode::S, 12), &RolloutSpec::new(20, 1500.0, 13, 0), 5, 1)
        .unwrap()
        .remove(0);
    path.log_indicator = -0.25;
    path.truncation = 17;
    let mut bytes = Vec::new();
    path.write_binary(&mut bytes).unwrap();
    assert_eq!(Path::read_binary(&mut bytes.as_slice()).unwrap(), path);
    assert!(Path::read_binary(&mut &bytes[..bytes.len() - 3]).is_err());
    let mut csv = Vec::new();
    path.write_csv(&sys, &mut csv).unwrap();
    let (dim, states) = Path::read_csv_states(csv.as_slice()).unwrap();
    assert_eq!(dim, 2);
    assert_eq!(states, path.states);
}
