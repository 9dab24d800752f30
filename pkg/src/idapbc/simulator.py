"""Closed-loop evaluation: feedback laws, fixed-step integration, checks.

The synthesized state feedback is

    u = (g^T g)^{-1} g^T [ (J_d - R_d) dH_d/dx - (J - R) dH/dx ] + v

with v = 0 by default; a v port is exposed for passivity probing.  The
analytic comparator compensates the potential and shapes it quadratically
around the target (the auxiliary-interconnection-free solution of the
matching equation), plus velocity damping.

Integration is classical fixed-step RK4 on the closed-loop vector field;
the input is evaluated at every stage state.  Trajectories record the
energies needed for the dissipation and passivity checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import numerics
from . import ph_core
from . import surrogate


class SimulationDivergedError(RuntimeError):
    """State left the finite range; carries the last valid sample."""

    def __init__(self, t, x):
        self.t = t
        self.x = np.asarray(x)
        super().__init__(f"state diverged at t={t:.6g}")


@dataclass
class Trajectory:
    times: np.ndarray        # (K+1,)
    states: np.ndarray       # (K+1, 2n)
    inputs: np.ndarray       # (K+1, n)
    energy: np.ndarray       # (K+1,) open-loop H
    shaped_energy: np.ndarray  # (K+1,) H_d of the active controller
    step: float

    def shaped_rate(self):
        """Per-step estimates of dH_d/dt (forward differences)."""
        return np.diff(self.shaped_energy) / self.step


class NeuralController:
    """Matching-based feedback from a trained surrogate."""

    def __init__(self, sys, net, ds):
        self.sys = sys
        self.net = net
        self.ds = ds
        self.n = sys.n
        self.jd = ds.j_desired()
        self._b_is_identity = np.array_equal(
            sys.input_map(ds.x_star[: sys.n]), np.eye(sys.n)
        )

    def u(self, x):
        sys, n = self.sys, self.n
        x = np.asarray(x, dtype=float)
        val, first, _ = self.net.numeric_forward(x, order=1)
        dha = first[:, 0]
        r2 = surrogate.r2_from_lvals(val[1:], n, self.net.eps)
        dh = ph_core.hamiltonian_gradient(sys, x)
        dhd = dh + dha
        d = sys.dissipation(x)
        flow_d = self.jd @ dhd
        flow_d[n:] -= (d + r2) @ dhd[n:]
        # open-loop flow (J - R) dH/dx in canonical coordinates
        flow = np.concatenate([dh[n:], -dh[:n] - d @ dh[n:]])
        diff = flow_d - flow
        if self._b_is_identity:
            return diff[n:]
        b = sys.input_map(x[:n])
        return numerics.spd_solve(b.T @ b, b.T @ diff[n:])

    def shaped_energy(self, x):
        val, _, _ = self.net.numeric_forward(x, order=0)
        return ph_core.hamiltonian(self.sys, x) + float(val[0])


class BaselineController:
    """Potential compensation, quadratic shaping around the target, and
    velocity damping; the J_a = 0 closed-form comparator."""

    def __init__(self, sys, x_star, kp, kd):
        self.sys = sys
        self.n = sys.n
        self.x_star = np.asarray(x_star, dtype=float)
        self.kp = np.atleast_2d(np.asarray(kp, dtype=float))
        self.kd = np.atleast_2d(np.asarray(kd, dtype=float))
        numerics.cholesky(self.kp)
        numerics.cholesky(self.kd)

    def u(self, x):
        sys, n = self.sys, self.n
        q, p = sys.split(x)
        qerr = q - self.x_star[:n]
        vel = numerics.spd_solve(sys.mass(q), p)
        force = sys.grad_potential(q) - self.kp @ qerr - self.kd @ vel
        b = sys.input_map(q)
        if b.shape == (n, n) and np.array_equal(b, np.eye(n)):
            return force
        return np.linalg.solve(b, force)

    def shaped_energy(self, x):
        sys, n = self.sys, self.n
        q, p = sys.split(x)
        qerr = q - self.x_star[:n]
        vel = numerics.spd_solve(sys.mass(q), p)
        return 0.5 * float(p @ vel) + 0.5 * float(qerr @ self.kp @ qerr)


class OpenLoopController:
    """Constant (default zero) input; shaped energy is the open-loop H."""

    def __init__(self, sys, u_const=None):
        self.sys = sys
        self.u_const = (
            np.zeros(sys.n) if u_const is None else np.asarray(u_const, dtype=float)
        )

    def u(self, x):
        return self.u_const

    def shaped_energy(self, x):
        return ph_core.hamiltonian(self.sys, x)


def control_law(sys, net, ds, x):
    """Synthesized feedback at one state (new-port injection v = 0)."""
    return NeuralController(sys, net, ds).u(x)


def baseline_controller(sys, x_star, kp, kd):
    """Analytic comparator; raises if the gains are not SPD."""
    return BaselineController(sys, x_star, kp, kd)


def simulate(sys, controller, x0, h, t_final, v_fn: Optional[Callable] = None):
    """Classical RK4 on the closed loop; returns a Trajectory.

    `v_fn(t, x)` injects through the new passive port (added to the
    feedback).  Raises SimulationDivergedError when the state leaves the
    finite range, keeping the last valid sample.
    """
    if h <= 0 or t_final < h:
        raise ph_core.ContractError("need h > 0 and t_final >= h")
    steps = int(round(t_final / h))
    n = sys.n
    x = np.asarray(x0, dtype=float).copy()

    def applied(t, xi):
        u = controller.u(xi)
        if v_fn is not None:
            u = u + v_fn(t, xi)
        return u

    def f(t, xi):
        return ph_core.open_loop_dynamics(sys, xi, applied(t, xi))

    times = np.empty(steps + 1)
    states = np.empty((steps + 1, 2 * n))
    inputs = np.empty((steps + 1, n))
    energy = np.empty(steps + 1)
    shaped = np.empty(steps + 1)

    def record(k, t, xi):
        times[k] = t
        states[k] = xi
        inputs[k] = applied(t, xi)
        energy[k] = ph_core.hamiltonian(sys, xi)
        shaped[k] = controller.shaped_energy(xi)

    record(0, 0.0, x)
    for k in range(steps):
        t = k * h
        k1 = f(t, x)
        k2 = f(t + h / 2, x + (h / 2) * k1)
        k3 = f(t + h / 2, x + (h / 2) * k2)
        k4 = f(t + h, x + h * k3)
        x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise SimulationDivergedError(times[k], states[k])
        record(k + 1, (k + 1) * h, x)
    return Trajectory(
        times=times,
        states=states,
        inputs=inputs,
        energy=energy,
        shaped_energy=shaped,
        step=h,
    )


@dataclass
class TrajectoryReport:
    final_distance: Optional[float]
    hd_max_increase: float
    hd_violations: int
    dissipation_identity_max: Optional[float]
    h_drift: float
    open_loop: bool


def verify_trajectory(traj, sys, net=None, ds=None, step_tol=1e-4):
    """Trajectory-level checks.

    Closed loop (net given): maximum per-step rise of the shaped energy,
    count of rises beyond `step_tol`, the worst defect of the dissipation
    identity Hd_dot = -dHd/dx^T R_d dHd/dx, and the distance to the target
    at the end.  Open loop: energy conservation drift |H(T) - H(0)|.
    """
    dh_steps = np.diff(traj.shaped_energy)
    hd_max_increase = float(dh_steps.max()) if dh_steps.size else 0.0
    hd_violations = int(np.sum(dh_steps > step_tol))
    drift = float(abs(traj.energy[-1] - traj.energy[0]))
    if net is None or ds is None:
        return TrajectoryReport(
            final_distance=None
            if ds is None
            else float(np.linalg.norm(traj.states[-1] - ds.x_star)),
            hd_max_increase=hd_max_increase,
            hd_violations=hd_violations,
            dissipation_identity_max=None,
            h_drift=drift,
            open_loop=True,
        )
    n = sys.n
    rate = traj.shaped_rate()
    worst = -np.inf
    for k in range(rate.size):
        # forward difference approximates the rate at the midpoint state
        x = 0.5 * (traj.states[k] + traj.states[k + 1])
        val, first, _ = net.numeric_forward(x, order=1)
        dhd = ph_core.hamiltonian_gradient(sys, x) + first[:, 0]
        rd_block = sys.dissipation(x) + surrogate.r2_from_lvals(
            val[1:], n, net.eps
        )
        dissip = float(dhd[n:] @ rd_block @ dhd[n:])
        worst = max(worst, rate[k] + dissip)
    return TrajectoryReport(
        final_distance=float(np.linalg.norm(traj.states[-1] - ds.x_star)),
        hd_max_increase=hd_max_increase,
        hd_violations=hd_violations,
        dissipation_identity_max=float(worst),
        h_drift=drift,
        open_loop=False,
    )


def trajectory_csv_rows(traj, n):
    """Header and full-precision rows in the export layout."""
    header = (
        ["t"]
        + [f"q{i + 1}" for i in range(n)]
        + [f"p{i + 1}" for i in range(n)]
        + [f"u{i + 1}" for i in range(n)]
        + ["H", "H_d"]
    )
    rows = []
    for k in range(traj.times.size):
        vals = (
            [traj.times[k]]
            + list(traj.states[k])
            + list(traj.inputs[k])
            + [traj.energy[k], traj.shaped_energy[k]]
        )
        rows.append([repr(float(v)) for v in vals])
    return header, rows


def write_trajectory_csv(path, traj, n):
    header, rows = trajectory_csv_rows(traj, n)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
