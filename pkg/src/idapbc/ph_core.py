"""Port-Hamiltonian mechanical system models.

A system is described by its inertia M(q), potential U(q), dissipation D(x)
and input map B(q); the state is x = (q, p) with p = M(q) q_dot.  The
canonical structure is

    J = [[0, I], [-I, 0]],   R = blockdiag(0, D),   g = [[0], [B]],

and the energy is H = p^T M^{-1}(q) p / 2 + U(q).  Built-in constructors
cover an actuated simple pendulum and a planar double pendulum; both carry
hand-coded energy gradients for the simulation hot path, cross-checked in
tests against the jet-based derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import numerics


class ModelInvariantError(ValueError):
    """A model invariant (SPD inertia, invertible input map) failed."""


class ContractError(ValueError):
    """Dimension or shape mismatch in an operation argument."""


@dataclass
class MechanicalPH:
    """Fully-actuated mechanical system in port-Hamiltonian form."""

    n: int
    mass: Callable[[np.ndarray], np.ndarray]
    potential: Callable[[np.ndarray], float]
    grad_potential: Callable[[np.ndarray], np.ndarray]
    dissipation: Callable[[np.ndarray], np.ndarray]
    input_map: Callable[[np.ndarray], np.ndarray]
    # jet-compatible forms used for exact state derivatives of H
    mass_expr: Callable = None
    potential_expr: Callable = None
    # optional hand-coded dH/dx fast path
    grad_hamiltonian_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[: self.n], x[self.n :]


def _inv_small(m):
    """Closed-form inverse for 1x1 / 2x2 entries that may be jets."""
    if len(m) == 1:
        return [[1.0 / m[0][0]]]
    a, b = m[0]
    c, d = m[1]
    det = a * d - b * c
    return [
        [d / det, -1.0 * b / det],
        [-1.0 * c / det, a / det],
    ]


def _hamiltonian_expr(sys, q_jets, p_jets):
    m = sys.mass_expr(q_jets)
    minv = _inv_small(m)
    kin = 0.0
    for i in range(sys.n):
        for j in range(sys.n):
            kin = kin + p_jets[i] * minv[i][j] * p_jets[j]
    return 0.5 * kin + sys.potential_expr(q_jets)


def hamiltonian(sys, x):
    """Total energy H(x) = p^T M^{-1}(q) p / 2 + U(q)."""
    q, p = sys.split(x)
    if not np.all(np.isfinite(x)):
        raise ContractError("state has non-finite entries")
    m = sys.mass(q)
    try:
        w = numerics.spd_solve(m, p)
    except numerics.SingularMatrixError as err:
        raise ModelInvariantError(f"inertia matrix not SPD at q={q}: {err}") from err
    return 0.5 * float(p @ w) + float(sys.potential(q))


def hamiltonian_gradient(sys, x):
    """dH/dx as a (2n,) vector."""
    if sys.grad_hamiltonian_fn is not None:
        return sys.grad_hamiltonian_fn(np.asarray(x, dtype=float))
    return hamiltonian_derivatives(sys, x)[1]


def hamiltonian_derivatives(sys, x):
    """(H, dH/dx, d2H/dx2) via jet evaluation; x may be (2n,) or (B, 2n)."""
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    xs = x.T if batched else x
    k = 2 * sys.n
    jets = [ad.Jet2.seed(xs[i], k, i) for i in range(k)]
    out = _hamiltonian_expr(sys, jets[: sys.n], jets[sys.n :])
    val = np.asarray(out.val, dtype=float)
    grad = np.asarray(out.first, dtype=float)
    hess = np.asarray(out.second, dtype=float)
    if batched:
        return val, np.moveaxis(grad, 0, -1), np.moveaxis(hess, (0, 1), (-2, -1))
    return float(val), grad.copy(), hess.copy()


def structure_matrices(sys, x):
    """Canonical (J, R, g) at a state."""
    q, _ = sys.split(x)
    n = sys.n
    s = 2 * n
    j = np.zeros((s, s))
    j[:n, n:] = np.eye(n)
    j[n:, :n] = -np.eye(n)
    r = np.zeros((s, s))
    r[n:, n:] = sys.dissipation(np.asarray(x, dtype=float))
    g = np.zeros((s, n))
    g[n:, :] = sys.input_map(q)
    return j, r, g


def open_loop_dynamics(sys, x, u):
    """xdot = [J(x) - R(x)] dH/dx + g(x) u."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (sys.n,):
        raise ContractError(f"input dimension {u.shape} != ({sys.n},)")
    q, _ = sys.split(x)
    dh = hamiltonian_gradient(sys, x)
    dq = dh[sys.n :]
    dp = -dh[: sys.n] - sys.dissipation(np.asarray(x, dtype=float)) @ dh[sys.n :]
    dp = dp + sys.input_map(q) @ u
    return np.concatenate([dq, dp])


def output_map(sys, x):
    """Passive output y = g^T dH/dx = B^T M^{-1} p (generalized velocity)."""
    q, _ = sys.split(x)
    dh = hamiltonian_gradient(sys, x)
    return sys.input_map(q).T @ dh[sys.n :]


def power_balance_defect(sys, x, u):
    """dH/dt minus the power-balance right-hand side; zero up to rounding.

    The balance reads Hdot = -dH/dp^T D dH/dp + y^T u, so the returned
    defect is an algebraic identity check, not a physical quantity.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    dh = hamiltonian_gradient(sys, x)
    xdot = open_loop_dynamics(sys, x, u)
    hdot = float(dh @ xdot)
    dp = dh[sys.n :]
    d = sys.dissipation(np.asarray(x, dtype=float))
    rhs = -float(dp @ d @ dp) + float(output_map(sys, x) @ u)
    return hdot - rhs


def left_annihilator(g):
    """Canonical full-rank left annihilator [I, 0] of g = [0; B].

    Fixing the canonical choice makes the matching residual reproduce the
    scalar matching equations of the benchmark systems exactly.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 2 or g.shape[0] != 2 * g.shape[1]:
        raise ContractError(f"expected (2n, n) input map, got {g.shape}")
    n = g.shape[1]
    if np.any(g[:n] != 0.0):
        raise ContractError("input map top block must vanish (g = [0; B])")
    if abs(np.linalg.det(g[n:])) < 1e-12:
        raise ModelInvariantError("input map bottom block B is singular")
    return np.hstack([np.eye(n), np.zeros((n, n))])


# ---------------------------------------------------------------------------
# built-in benchmark systems
# ---------------------------------------------------------------------------

def simple_pendulum(m=1.0, l=1.0, grav=9.81):
    """Actuated pendulum: H = p^2 / (2 m l^2) + m grav l (1 - cos q)."""
    ml2 = m * l * l
    mgl = m * grav * l

    def grad_h(x):
        return np.array([mgl * np.sin(x[0]), x[1] / ml2])

    return MechanicalPH(
        n=1,
        mass=lambda q: np.array([[ml2]]),
        potential=lambda q: mgl * (1.0 - np.cos(q[0])),
        grad_potential=lambda q: np.array([mgl * np.sin(q[0])]),
        dissipation=lambda x: np.zeros((1, 1)),
        input_map=lambda q: np.eye(1),
        mass_expr=lambda qj: [[ml2]],
        potential_expr=lambda qj: mgl * (1.0 - ad.cos(qj[0])),
        grad_hamiltonian_fn=grad_h,
        name="simple_pendulum",
        params={"m": m, "l": l, "grav": grav},
    )


def double_pendulum(m1=1.0, m2=1.0, l1=1.0, l2=1.0, grav=9.81):
    """Planar double pendulum, actuated at both joints."""
    a = (m1 + m2) * l1 * l1
    bm = m2 * l2 * l2
    c = m2 * l1 * l2
    g1 = (m1 + m2) * grav * l1
    g2 = m2 * grav * l2

    def mass(q):
        cd = c * np.cos(q[0] - q[1])
        return np.array([[a, cd], [cd, bm]])

    def grad_h(x):
        q1, q2, p1, p2 = x
        delta = q1 - q2
        cd = c * np.cos(delta)
        sd = c * np.sin(delta)
        det = a * bm - cd * cd
        w1 = (bm * p1 - cd * p2) / det
        w2 = (-cd * p1 + a * p2) / det
        # dH/dq_i = -w^T dM/dq_i w / 2 + dU/dq_i; dM/dq1 = [[0,-sd],[-sd,0]]
        coup = sd * w1 * w2
        return np.array(
            [coup + g1 * np.sin(q1), -coup + g2 * np.sin(q2), w1, w2]
        )

    return MechanicalPH(
        n=2,
        mass=mass,
        potential=lambda q: g1 * (1.0 - np.cos(q[0])) + g2 * (1.0 - np.cos(q[1])),
        grad_potential=lambda q: np.array([g1 * np.sin(q[0]), g2 * np.sin(q[1])]),
        dissipation=lambda x: np.zeros((2, 2)),
        input_map=lambda q: np.eye(2),
        mass_expr=lambda qj: [
            [a, c * ad.cos(qj[0] - qj[1])],
            [c * ad.cos(qj[0] - qj[1]), bm],
        ],
        potential_expr=lambda qj: g1 * (1.0 - ad.cos(qj[0]))
        + g2 * (1.0 - ad.cos(qj[1])),
        grad_hamiltonian_fn=grad_h,
        name="double_pendulum",
        params={"m1": m1, "m2": m2, "l1": l1, "l2": l2, "grav": grav},
    )


BUILTIN_SYSTEMS = {
    "simple_pendulum": simple_pendulum,
    "double_pendulum": double_pendulum,
}


def make_system(name, params=None):
    """Instantiate a built-in system from its name and parameter map."""
    if name not in BUILTIN_SYSTEMS:
        raise ContractError(
            f"unknown system '{name}'; available: {sorted(BUILTIN_SYSTEMS)}"
        )
    return BUILTIN_SYSTEMS[name](**(params or {}))
