from __future__ import annotations

import math

import numpy as np
import pytest

from signavatar.lbfgs import LbfgsConfig, OptimizationError, lbfgs_minimize, strong_wolfe


def quadratic(a, b):
    return lambda x: (0.5 * x @ a @ x - b @ x, a @ x - b)


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_convex_quadratic(rng):
    m = rng.normal(size=(6, 6))
    a = m @ m.T + 6 * np.eye(6)
    b = rng.normal(size=6)
    res = lbfgs_minimize(quadratic(a, b), np.zeros(6), LbfgsConfig(gtol=1e-12, ftol=0.0, max_iters=200))
    assert np.max(np.abs(res.x - np.linalg.solve(a, b))) < 1e-8


def test_rosenbrock():
    res = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), LbfgsConfig(gtol=1e-10, ftol=0.0, max_iters=500))
    assert np.max(np.abs(res.x - 1.0)) < 1e-6
    assert res.converged


def test_monotone_history_on_random_problems():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 12))
        m = rng.normal(size=(n, n))
        a = m @ m.T + 0.1 * np.eye(n)
        b = rng.normal(size=n)
        c = rng.uniform(0.1, 2.0)

        def f(x):
            # smooth nonconvex-ish: quadratic plus a cosine ripple
            q = 0.5 * x @ a @ x - b @ x + c * np.sum(np.cos(x))
            return q, a @ x - b - c * np.sin(x)

        x0 = rng.normal(0, 3, n)
        res = lbfgs_minimize(f, x0, LbfgsConfig(max_iters=60))
        hist = np.array(res.history)
        assert np.all(np.diff(hist) <= 0)
        assert res.value <= f(x0)[0]


def test_iteration_cap_respected():
    res = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), LbfgsConfig(max_iters=3))
    assert res.iterations <= 3 and not res.converged


def test_zero_iterations_returns_start():
    x0 = np.array([0.5, 0.5])
    res = lbfgs_minimize(rosenbrock, x0, LbfgsConfig(max_iters=0))
    assert np.array_equal(res.x, x0) and res.value == rosenbrock(x0)[0]


def test_non_finite_start_raises():
    with pytest.raises(OptimizationError):
        lbfgs_minimize(lambda x: (math.nan, x), np.zeros(2))


def test_non_finite_region_keeps_last_good_iterate():
    # finite only for x > -1; the minimiser of the quadratic sits outside
    def f(x):
        if x[0] <= -1:
            return math.inf, np.array([math.nan])
        return float((x[0] + 3) ** 2), np.array([2 * (x[0] + 3)])

    res = lbfgs_minimize(f, np.array([2.0]), LbfgsConfig(max_iters=50))
    assert res.x[0] > -1 and res.value < 25.0


def test_strong_wolfe_conditions_hold():
    cfg = LbfgsConfig()
    x = np.array([-1.2, 1.0])
    f0, g0 = rosenbrock(x)
    d = -g0

    def phi(a):
        f, g = rosenbrock(x + a * d)
        return f, float(g @ d), a

    alpha, fa, ga, _, _ = strong_wolfe(phi, f0, float(g0 @ d), 1e-3, cfg)
    assert alpha > 0
    assert fa <= f0 + cfg.c1 * alpha * float(g0 @ d)
    assert abs(ga) <= cfg.c2 * abs(float(g0 @ d))


def test_config_validation():
    with pytest.raises(ValueError):
        LbfgsConfig(c1=0.9, c2=0.1)
