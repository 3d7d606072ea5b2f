"""Smoke test for the ppest extension module.

Build and install first:  pip install maturin && maturin develop --release
(or `pip install . --no-build-isolation` from crates/python), then run
`python python/smoke_test.py`.
"""

import math
import random

import ppest


def main():
    truth = [-2500.0, 12.0, 140.0]
    scene = ppest.Scene(pitch=0.05)
    noise = ppest.NoiseModel.isotropic(1.0)

    clean = scene.project(truth)
    assert len(clean) == 8
    jac = scene.jacobian(truth)
    assert len(jac) == 8 and all(len(r) == 3 for r in jac)

    y = [c + e for c, e in zip(clean, noise.sample(7))]
    linear = ppest.estimate_linear(scene, y, noise, truth)
    lsq = ppest.estimate_lsq(scene, y, noise, truth, samples=400, seed=1)
    mcmc = ppest.estimate_mcmc(scene, y, noise, truth, samples=300, warmup=200, seed=2)
    for name, b in [("linear", linear), ("lsq", lsq), ("mcmc", mcmc)]:
        err = [m - t for m, t in zip(b.mean, truth)]
        std = [math.sqrt(b.covariance[i][i]) for i in range(3)]
        assert all(abs(e) < 6 * s for e, s in zip(err, std)), (name, err, std)
        print(f"{name:>6}: {b}  sharpness {b.sharpness():.3g} m^3")

    assert abs(ppest.sharpness([[1.0, 0.0], [0.0, 1.0]]) - math.pi) < 1e-12

    rng = random.Random(3)
    beliefs, truths = [], []
    for _ in range(2000):
        mean = [rng.gauss(0, 1) for _ in range(3)]
        beliefs.append(ppest.Belief(mean, [[1, 0, 0], [0, 1, 0], [0, 0, 1]]))
        truths.append([0.0, 0.0, 0.0])
    curve = ppest.calibration_curve(beliefs, truths)
    worst = max(abs(c - r) for r, c in curve)
    assert worst < 0.05, curve
    print(f"calibration of a calibrated population: max deviation {worst:.3f}")

    track = [ppest.Belief([-5000.0 + 70.0 * t, 0.0, 300.0], [[400, 0, 0], [0, 25, 0], [0, 0, 25]]) for t in range(20)]
    filtered = ppest.kalman_filter(track, dt=1.0)
    assert filtered[-1].sharpness() < track[-1].sharpness()

    report = ppest.run_suite("trials = 20\nestimators = [\"linear\"]\nseed = 5\n")
    print(f"suite (20 trials): linear max deviation {report['linear']['max_deviation']:.3f}")

    try:
        ppest.NoiseModel.isotropic(-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative sigma accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
