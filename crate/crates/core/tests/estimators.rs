use nalgebra::{Matrix3, Vector3};
use ppest::estimators::nuts::NutsConfig;
use ppest::estimators::*;
use ppest::geometry::{runway_corners, sample_pose, CameraModel, RunwaySpec, Scene};
use ppest::noise::NoiseModel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario(seed: u64, noise: &NoiseModel) -> (Vector3<f64>, PoseProblem) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = sample_pose(&mut rng);
    let scene = Scene::new(
        runway_corners(&RunwaySpec::default()),
        CameraModel::default(),
        pose.attitude,
    );
    let y = scene.project_all(&pose.position).unwrap() + noise.sample(&mut rng).epsilon;
    (pose.position, PoseProblem::new(scene, y))
}

fn assert_symmetric_psd(c: &Matrix3<f64>) {
    assert!((c - c.transpose()).amax() <= 1e-12 * c.amax().max(f64::MIN_POSITIVE));
    assert!(c.symmetric_eigenvalues().min() >= -1e-10 * c.trace());
}

#[test]
fn linear_matches_sampling_in_near_linear_regime() {
    let noise = NoiseModel::isotropic(0.5).unwrap();
    for seed in 0..5 {
        let (truth, p) = scenario(seed, &noise);
        let prior = Prior::around(truth);
        let lin = estimate_linear(&p, &noise, &truth, &LinearOptions::default()).unwrap();
        let cfg = LsqConfig {
            samples: 2000,
            ..Default::default()
        };
        let lsq = estimate_lsq(&p, &noise, &prior, &cfg, &mut ChaCha8Rng::seed_from_u64(100 + seed)).unwrap();
        let rel = (lin.belief.covariance - lsq.belief.covariance).norm() / lsq.belief.covariance.norm();
        assert!(rel <= 0.2, "seed {seed}: {rel}");
    }
}

#[test]
fn every_estimator_recovers_truth_without_noise() {
    let noise = NoiseModel::isotropic(1e-8).unwrap();
    for seed in 0..3 {
        let (truth, p) = scenario(seed, &noise);
        let prior = Prior::around(truth);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = prior.sample(&mut rng);
        let lin = estimate_linear(&p, &noise, &init, &LinearOptions::default()).unwrap();
        assert!((lin.belief.mean - truth).norm() < 1e-5);
        let lsq = estimate_lsq(
            &p,
            &noise,
            &prior,
            &LsqConfig {
                samples: 50,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!((lsq.belief.mean - truth).norm() < 1e-5);
        let cfg = McmcConfig {
            sampler: NutsConfig {
                samples: 100,
                warmup: 150,
                ..Default::default()
            },
            prior_only: false,
        };
        let mcmc = estimate_mcmc(&p, &noise, &prior, &cfg, &mut rng).unwrap();
        assert!((mcmc.belief.mean - truth).norm() < 1e-5);
    }
}

#[test]
fn beliefs_are_symmetric_psd() {
    let prior_cfg = McmcConfig {
        sampler: NutsConfig {
            samples: 200,
            ..Default::default()
        },
        prior_only: false,
    };
    for noise in [
        NoiseModel::isotropic(1.0).unwrap(),
        NoiseModel::cross_corner_correlated(1.0, 0.7).unwrap(),
        NoiseModel::long_tail(0.75, 1.0, 3.0).unwrap(),
    ] {
        for seed in 0..4 {
            let (truth, p) = scenario(seed, &noise);
            let prior = Prior::around(truth);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_symmetric_psd(
                &estimate_linear(&p, &noise, &truth, &LinearOptions::default())
                    .unwrap()
                    .belief
                    .covariance,
            );
            assert_symmetric_psd(
                &estimate_lsq(
                    &p,
                    &noise,
                    &prior,
                    &LsqConfig {
                        samples: 100,
                        ..Default::default()
                    },
                    &mut rng,
                )
                .unwrap()
                .belief
                .covariance,
            );
            assert_symmetric_psd(
                &estimate_mcmc(&p, &noise, &prior, &prior_cfg, &mut rng)
                    .unwrap()
                    .belief
                    .covariance,
            );
        }
    }
}

#[test]
fn posterior_uses_exact_mixture_density() {
    let mix = NoiseModel::long_tail(0.75, 1.0, 3.0).unwrap();
    let matched = NoiseModel::correlated(mix.covariance().matrix).unwrap();
    let (truth, p) = scenario(9, &mix);
    let prior = Prior::around(truth);
    let a = PosePosterior::new(&p, &mix, &prior).unwrap();
    let b = PosePosterior::new(&p, &matched, &prior).unwrap();
    let beta = truth + Vector3::new(10.0, 1.0, -1.0);
    let eps = p.measurements - p.scene.project_all(&beta).unwrap();
    let d = beta - truth;
    let prior_term = -0.5 * (d.x * d.x / 1e6 + d.y * d.y / 4e4 + d.z * d.z / 4e4);
    assert!((a.log_density(&beta) - (prior_term + mix.log_density(&eps))).abs() < 1e-9);
    assert!((a.log_density(&beta) - b.log_density(&beta)).abs() > 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn posterior_gradient_matches_finite_differences(seed in any::<u64>(), which in 0usize..3) {
        let noise = match which {
            0 => NoiseModel::isotropic(1.0).unwrap(),
            1 => NoiseModel::cross_corner_correlated(1.0, 0.7).unwrap(),
            _ => NoiseModel::long_tail(0.75, 1.0, 3.0).unwrap(),
        };
        let (truth, p) = scenario(seed, &noise);
        let post = PosePosterior::new(&p, &noise, &Prior::around(truth)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let beta = truth + Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let (_, g) = post.log_density_and_gradient(&beta);
        let fd = Vector3::from_fn(|j, _| {
            let h = 1e-6 * beta[j].abs().max(1.0);
            let (mut a, mut b) = (beta, beta);
            a[j] += h;
            b[j] -= h;
            (post.log_density(&a) - post.log_density(&b)) / (2.0 * h)
        });
        prop_assert!((g - fd).norm() <= 1e-5 * g.norm().max(1.0), "{} vs {}", g, fd);
    }
}
