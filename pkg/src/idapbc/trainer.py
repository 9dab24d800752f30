"""Collocation sampling and the two-stage optimization schedule.

Training runs full-batch: a first-order stage (Adam, stopped on a windowed
relative-change tolerance) followed by a limited-memory quasi-Newton stage
(L-BFGS with a strong-Wolfe line search) for deep refinement.  Collocation
points are drawn once per run and kept fixed, so the second stage sees a
deterministic objective.  Identical settings and seeds reproduce checkpoints
bit for bit.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import residuals
from . import surrogate


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the last residual breakdown."""

    def __init__(self, iteration, values):
        self.iteration = iteration
        self.values = values
        super().__init__(
            f"non-finite loss at iteration {iteration}; last residuals: {values}"
        )


@dataclass
class CollocationDomain:
    """Axis-aligned box in state space plus sample count and seed.

    The target state is appended to every sample so the equilibrium terms
    always see it.  A degenerate box edge (lo == hi) pins that coordinate.
    """

    q_bounds: np.ndarray  # (n, 2)
    p_bounds: np.ndarray  # (n, 2)
    n_points: int
    seed: int
    x_star: np.ndarray

    def __post_init__(self):
        self.q_bounds = np.atleast_2d(np.asarray(self.q_bounds, dtype=float))
        self.p_bounds = np.atleast_2d(np.asarray(self.p_bounds, dtype=float))
        self.x_star = np.asarray(self.x_star, dtype=float)
        n = self.q_bounds.shape[0]
        if self.p_bounds.shape != (n, 2) or self.q_bounds.shape != (n, 2):
            raise ValueError("q_bounds/p_bounds must be (n, 2)")
        lows, highs = self._lows_highs()
        if np.any(highs < lows):
            raise ValueError("box bounds must satisfy lower <= upper")
        if self.n_points < 0:
            raise ValueError("n_points must be >= 0")
        if self.x_star.shape != (2 * n,):
            raise ValueError("x_star dimension mismatch")
        if np.any(self.x_star < lows) or np.any(self.x_star > highs):
            raise ValueError("x_star must lie inside the sampling box")

    def _lows_highs(self):
        lows = np.concatenate([self.q_bounds[:, 0], self.p_bounds[:, 0]])
        highs = np.concatenate([self.q_bounds[:, 1], self.p_bounds[:, 1]])
        return lows, highs


def sample_collocation(domain):
    """Uniform points in the box, deterministic per seed; target appended."""
    lows, highs = domain._lows_highs()
    rng = np.random.default_rng(domain.seed)
    pts = rng.uniform(lows, highs, size=(domain.n_points, lows.size))
    return np.vstack([pts, domain.x_star[None]])


# ---------------------------------------------------------------------------
# optimization stages
# ---------------------------------------------------------------------------

def adam_stage(
    net,
    loss_fn,
    lr=1e-3,
    tol=1e-6,
    max_iters=50000,
    on_iterate=None,
    window=100,
):
    """Full-batch Adam (beta1 0.9, beta2 0.999, eps 1e-8).

    Stops when the relative loss change over a `window`-iteration span drops
    below `tol`, or at `max_iters`.  Returns (iterations, converged).
    """
    if lr <= 0 or tol <= 0:
        raise ValueError("lr and tol must be positive")
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(net.theta)
    v = np.zeros_like(net.theta)
    history = deque(maxlen=window + 1)
    for k in range(max_iters):
        loss, grad = loss_fn(net.theta)
        if not np.isfinite(loss):
            raise TrainingDivergedError(k, loss)
        if on_iterate:
            on_iterate(k, loss)
        history.append(loss)
        if len(history) == window + 1:
            ref = history[0]
            if abs(loss - ref) / max(ref, 1e-12) < tol:
                return k + 1, True
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        mhat = m / (1 - beta1 ** (k + 1))
        vhat = v / (1 - beta2 ** (k + 1))
        net.set_theta(net.theta - lr * mhat / (np.sqrt(vhat) + eps))
    return max_iters, False


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolant on [a, b]; None when degenerate."""
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    denom = gb - ga + 2 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / denom
    return t if np.isfinite(t) else None


def _zoom(phi, lo, flo, glo, hi, fhi, ghi, f0, g0, c1, c2, max_iter=30):
    for _ in range(max_iter):
        t = _cubic_min(lo, flo, glo, hi, fhi, ghi)
        width = abs(hi - lo)
        inner_lo, inner_hi = min(lo, hi), max(lo, hi)
        if (
            t is None
            or not (inner_lo + 0.1 * width <= t <= inner_hi - 0.1 * width)
        ):
            t = 0.5 * (lo + hi)
        ft, gt = phi(t)
        if ft > f0 + c1 * t * g0 or ft >= flo:
            hi, fhi, ghi = t, ft, gt
        else:
            if abs(gt) <= -c2 * g0:
                return t, ft, gt
            if gt * (hi - lo) >= 0:
                hi, fhi, ghi = lo, flo, glo
            lo, flo, glo = t, ft, gt
        if abs(hi - lo) < 1e-14 * max(1.0, abs(lo)):
            break
    return None


def strong_wolfe_search(phi, f0, g0, alpha0=1.0, c1=1e-4, c2=0.9, alpha_max=1e3):
    """Line search enforcing the strong Wolfe conditions.

    `phi(alpha)` returns (value, slope) along the ray.  Returns
    (alpha, value, slope) or None when no acceptable step is found.
    """
    if g0 >= 0:
        return None
    prev_a, prev_f, prev_g = 0.0, f0, g0
    a = alpha0
    for i in range(25):
        fa, ga = phi(a)
        if fa > f0 + c1 * a * g0 or (i > 0 and fa >= prev_f):
            return _zoom(phi, prev_a, prev_f, prev_g, a, fa, ga, f0, g0, c1, c2)
        if abs(ga) <= -c2 * g0:
            return a, fa, ga
        if ga >= 0:
            return _zoom(phi, a, fa, ga, prev_a, prev_f, prev_g, f0, g0, c1, c2)
        prev_a, prev_f, prev_g = a, fa, ga
        a = min(2.0 * a, alpha_max)
        if a >= alpha_max:
            fa, ga = phi(a)
            if fa <= f0 + c1 * a * g0:  # accept the cap only on real decrease
                return a, fa, ga
            return _zoom(phi, prev_a, prev_f, prev_g, a, fa, ga, f0, g0, c1, c2)
    return None


def armijo_backtrack(phi, f0, g0, alpha0=1.0, c1=1e-4, shrink=0.3, max_iter=35):
    """Sufficient-decrease fallback for rays where the curvature condition
    cannot be certified (extremely ill-conditioned tails)."""
    if g0 >= 0:
        return None
    a = alpha0
    for _ in range(max_iter):
        fa, ga = phi(a)
        if fa <= f0 + c1 * a * g0:
            return a, fa, ga
        a *= shrink
    return None


def lbfgs_stage(
    net,
    loss_fn,
    memory=10,
    max_iters=1000,
    gtol=1e-12,
    ftol=1e-16,
    on_iterate=None,
    max_restarts=4,
):
    """Limited-memory BFGS with strong-Wolfe steps, unconstrained.

    Keeps the best parameters seen.  A failed line search clears the
    curvature memory and retries from steepest descent (kink crossings of
    the hinge terms routinely poison the pairs); after `max_restarts`
    consecutive failures the stage returns with status "line_search" (the
    precision floor for this loss).  Returns (iterations, status) with
    status in {"gtol", "ftol", "line_search", "max_iters"}.
    """
    theta = net.theta.copy()
    f, g = loss_fn(theta)
    if not np.isfinite(f):
        raise TrainingDivergedError(0, f)
    best_theta, best_f = theta.copy(), f
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    rho_hist: deque = deque(maxlen=memory)
    status = "max_iters"
    iters = 0
    failures = 0
    fb_alpha = 1e-2  # warm start for the backtracking fallback
    for k in range(max_iters):
        if np.max(np.abs(g)) <= gtol:
            status = "gtol"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(
            zip(s_hist, y_hist, rho_hist), reversed(alphas)
        ):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        slope = g @ d
        if slope >= 0:  # safeguard: reset to steepest descent
            d = -g
            slope = -(g @ g)
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()

        def phi(alpha):
            th = theta + alpha * d
            fv, gv = loss_fn(th)
            phi.cache = (th, fv, gv)
            return fv, float(gv @ d)

        alpha0 = 1.0 if y_hist else min(1.0, 1.0 / max(1.0, np.abs(g).sum()))
        res = strong_wolfe_search(phi, f, slope, alpha0=alpha0)
        if res is None:
            res = armijo_backtrack(
                phi, f, slope, alpha0=min(alpha0, 4.0 * fb_alpha)
            )
            if res is not None:
                fb_alpha = max(res[0], 1e-12)
        if res is None:
            failures += 1
            if failures > max_restarts or not s_hist:
                status = "line_search"
                break
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            continue
        failures = 0
        _, f_new, _ = res
        theta_new, f_new, g_new = phi.cache
        if not np.isfinite(f_new):
            raise TrainingDivergedError(k, f_new)
        s = theta_new - theta
        y = g_new - g
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
        rel_drop = abs(f - f_new) / max(abs(f), 1e-12)
        theta, g, f = theta_new, g_new, f_new
        net.set_theta(theta)
        if f < best_f:
            best_f, best_theta = f, theta.copy()
        iters = k + 1
        if on_iterate:
            on_iterate(k, f)
        if rel_drop < ftol:
            status = "ftol"
            break
    # line-search trials mutate the net through loss_fn; end on the best point
    net.set_theta(best_theta)
    return iters, status


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    domain: CollocationDomain
    adam_lr: float = 1e-3
    adam_tol: float = 1e-6
    adam_max_iters: int = 50000
    lbfgs_memory: int = 10
    lbfgs_max_iters: int = 1000
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None


@dataclass
class TrainReport:
    adam_iterations: int
    adam_converged: bool
    lbfgs_iterations: int
    lbfgs_status: str
    converged: bool
    wall_time: float
    initial: dict
    final: dict
    checkpoint_path: Optional[str]
    log_path: Optional[str]


def train(sys, ds, net, settings, system_name=None, system_params=None, extra=None):
    """Sample collocation points, run both stages, write artifacts.

    The convergence flag is true when the quasi-Newton stage terminated by
    its own criteria (gradient, relative decrease, or line-search precision
    floor) rather than by the iteration cap.
    """
    t0 = time.perf_counter()
    points = sample_collocation(settings.domain)
    asm = residuals.ResidualAssembler(sys, net, ds, points)

    state = {"values": None, "best_loss": np.inf, "best_theta": None}

    def loss_fn(theta):
        net.set_theta(theta)
        try:
            bd = asm.evaluate(total_grad=True)
        except Exception as err:
            raise TrainingDivergedError(-1, state["values"]) from err
        state["values"] = bd.as_dict()
        if bd.total < state["best_loss"]:
            state["best_loss"] = bd.total
            state["best_theta"] = np.array(theta, copy=True)
        return bd.total, bd.grads["total"]

    rows = []

    def log_iter(offset):
        def cb(k, loss):
            rows.append((offset + k, state["values"]))

        return cb

    initial = asm.evaluate().as_dict()
    adam_iters, adam_conv = adam_stage(
        net,
        loss_fn,
        lr=settings.adam_lr,
        tol=settings.adam_tol,
        max_iters=settings.adam_max_iters,
        on_iterate=log_iter(0),
    )
    lbfgs_iters, lbfgs_status = lbfgs_stage(
        net,
        loss_fn,
        memory=settings.lbfgs_memory,
        max_iters=settings.lbfgs_max_iters,
        on_iterate=log_iter(adam_iters),
    )
    final = residuals.ResidualAssembler(sys, net, ds, points).evaluate().as_dict()
    if state["best_theta"] is not None and final["total"] > state["best_loss"]:
        net.set_theta(state["best_theta"])
        final = residuals.ResidualAssembler(sys, net, ds, points).evaluate().as_dict()

    if settings.log_path:
        with open(settings.log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter"] + list(residuals.TERMS) + ["total"])
            for k, values in rows:
                writer.writerow(
                    [k] + [repr(values[name]) for name in residuals.TERMS]
                    + [repr(values["total"])]
                )
    if settings.checkpoint_path:
        surrogate.save_checkpoint(
            settings.checkpoint_path,
            net,
            ds,
            system_name or sys.name,
            system_params if system_params is not None else sys.params,
            extra=extra,
        )
    return TrainReport(
        adam_iterations=adam_iters,
        adam_converged=adam_conv,
        lbfgs_iterations=lbfgs_iters,
        lbfgs_status=lbfgs_status,
        converged=lbfgs_status != "max_iters",
        wall_time=time.perf_counter() - t0,
        initial=initial,
        final=final,
        checkpoint_path=settings.checkpoint_path,
        log_path=settings.log_path,
    )
