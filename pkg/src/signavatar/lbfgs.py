"""Limited-memory BFGS with a strong-Wolfe line search."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class OptimizationError(RuntimeError):
    """Objective or gradient went non-finite; ``x``/``value`` hold the last good iterate."""

    def __init__(self, msg, x=None, value=None):
        super().__init__(msg)
        self.x = x
        self.value = value


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 100
    gtol: float = 1e-6
    ftol: float = 1e-12
    c1: float = 1e-4
    c2: float = 0.9
    max_ls: int = 20

    def __post_init__(self):
        if self.memory < 1 or self.max_iters < 0:
            raise ValueError("memory must be >= 1 and max_iters >= 0")
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("line search constants need 0 < c1 < c2 < 1")


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    message: str
    n_evals: int = 0
    history: list = field(default_factory=list)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimiser of the cubic through (a, fa, ga), (b, fb, gb); None if degenerate."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), b - a)
    den = gb - ga + 2.0 * d2
    if den == 0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / den
    return t if math.isfinite(t) else None


def _armijo(a, f_a, g_a, f0, g0, cfg):
    if not math.isfinite(f_a):
        return False
    if f_a <= f0 + cfg.c1 * a * g0:
        return True
    # f is flat to rounding near a minimiser: fall back to the derivative form
    flat = abs(f_a - f0) <= 1e-12 * max(abs(f0), 1.0)
    return flat and f_a <= f0 and math.isfinite(g_a) and g_a <= (2 * cfg.c1 - 1) * g0


def _zoom(phi, lo, hi, f0, g0, cfg, budget):
    a_lo, f_lo, g_lo = lo
    a_hi, f_hi, g_hi = hi
    best = lo
    for _ in range(budget):
        t = None
        if math.isfinite(f_hi) and g_hi is not None and math.isfinite(g_hi):
            t = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        left, right = min(a_lo, a_hi), max(a_lo, a_hi)
        width = right - left
        if t is None or not (left + 0.1 * width <= t <= right - 0.1 * width):
            t = 0.5 * (a_lo + a_hi)
        f_t, g_t, extra = phi(t)
        if not _armijo(t, f_t, g_t, f0, g0, cfg) or (f_t >= f_lo and not f_t == f_lo == f0):
            a_hi, f_hi, g_hi = t, f_t, g_t
        else:
            best = (t, f_t, g_t, extra)
            if abs(g_t) <= -cfg.c2 * g0:
                return best, True
            if g_t * (a_hi - a_lo) >= 0:
                a_hi, f_hi, g_hi = a_lo, f_lo, g_lo
            a_lo, f_lo, g_lo = t, f_t, g_t
        if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
            break
    return best, False


def strong_wolfe(phi, f0, g0, alpha0, cfg: LbfgsConfig):
    """Step length search along a descent direction.

    ``phi(alpha)`` returns ``(f, directional_derivative, payload)``. Returns
    ``(alpha, f, g, payload, wolfe_ok)``; ``alpha == 0`` means no decrease
    was found. Non-finite trial values are treated as overshooting.
    """
    prev = (0.0, f0, g0, None)
    alpha = alpha0
    evals = 0
    best = prev
    for i in range(cfg.max_ls):
        f_a, g_a, extra = phi(alpha)
        evals += 1
        cur = (alpha, f_a, g_a, extra)
        if not _armijo(alpha, f_a, g_a, f0, g0, cfg) or (i > 0 and f_a > prev[1]):
            res, ok = _zoom(phi, prev[:3], cur[:3], f0, g0, cfg, cfg.max_ls - evals)
            if len(res) == 3:  # zoom never improved on the bracket's low end
                res = prev
            return res[0], res[1], res[2], res[3], ok
        if abs(g_a) <= -cfg.c2 * g0:
            return alpha, f_a, g_a, extra, True
        best = cur
        if g_a >= 0:
            res, ok = _zoom(phi, cur[:3], prev[:3], f0, g0, cfg, cfg.max_ls - evals)
            if len(res) == 3:
                res = cur
            return res[0], res[1], res[2], res[3], ok
        prev = cur
        alpha *= 2.0
    return best[0], best[1], best[2], best[3], False


def _two_loop(g, mem):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, _ = mem[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(f_and_grad, x0, cfg: LbfgsConfig | None = None) -> LbfgsResult:
    """Minimise ``f_and_grad(x) -> (f, g)`` from ``x0``.

    Accepted iterates never increase the objective. When the quasi-Newton
    direction is not a descent direction or its line search fails the memory
    is cleared and a steepest-descent step is tried instead.
    """
    cfg = cfg or LbfgsConfig()
    x = np.array(x0, dtype=float)
    f, g = f_and_grad(x)
    g = np.asarray(g, dtype=float)
    n_evals = 1
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError("objective is not finite at the starting point", x, f)
    history = [float(f)]
    mem: deque = deque(maxlen=cfg.memory)
    it = 0
    msg = "iteration limit"
    converged = False
    while True:
        if np.max(np.abs(g), initial=0.0) <= cfg.gtol:
            converged, msg = True, "gradient tolerance"
            break
        if it >= cfg.max_iters:
            break
        d = _two_loop(g, mem)
        gd = float(g @ d)
        steepest = not mem
        if not gd < 0:
            mem.clear()
            d, gd, steepest = -g, -float(g @ g), True
        while True:
            # unscaled gradient steps start at unit length in x
            alpha0 = min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300)) if steepest else 1.0
            cache = {}

            def phi(a, d=d):
                nonlocal n_evals
                xt = x + a * d
                ft, gt = f_and_grad(xt)
                n_evals += 1
                gt = np.asarray(gt, dtype=float)
                if not math.isfinite(ft) or not np.all(np.isfinite(gt)):
                    return math.inf, math.nan, None
                cache[a] = (xt, gt)
                return float(ft), float(gt @ d), a

            alpha, f_new, _, key, _ = strong_wolfe(phi, f, gd, alpha0, cfg)
            if alpha > 0 and key is not None and f_new <= f:
                break
            if steepest:
                alpha = 0.0
                break
            mem.clear()
            d, gd, steepest = -g, -float(g @ g), True
        if alpha == 0.0:
            if not math.isfinite(f):
                raise OptimizationError("objective became non-finite", x, f)
            msg = "line search failed"
            break
        x_new, g_new = cache[key]
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(y @ y) and sy > 0:
            mem.append((s, y, 1.0 / sy))
        f_prev = f
        x, f, g = x_new, f_new, g_new
        history.append(float(f))
        it += 1
        if cfg.ftol > 0 and f_prev - f <= cfg.ftol * max(abs(f_prev), abs(f), 1.0):
            converged, msg = True, "function tolerance"
            break
    return LbfgsResult(x, float(f), it, converged, msg, n_evals, history)
