"""Neural parameterization of the auxiliary energy and damping functions.

One dense tanh trunk feeds two output heads: a scalar auxiliary energy and
the n(n+1)/2 entries of a lower-triangular factor L whose Gram matrix
L L^T + eps I is the trained damping block.  The factorization keeps the
desired damping positive definite for every parameter vector instead of
penalizing violations.

The energy head's output weights start at zero, so an untrained net has
auxiliary energy identically 0 and the matching residual starts from the
open-loop system.  The damping factor starts at a constant diagonal bias
instead of zero (L = 0 is a gradient saddle of L L^T).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics
from . import ph_core

CHECKPOINT_FORMAT = "idapbc-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid architecture or desired-structure settings."""


@dataclass
class DesiredStructure:
    """User-fixed closed-loop choices: interconnection blocks, target state,
    transient rate, Lyapunov margin, and the complementary-residual data."""

    j1: np.ndarray
    j2: np.ndarray
    x_star: np.ndarray
    c_transient: float
    c_lyap: float
    lambda_comp: float = 0.0
    kp_comp: np.ndarray = None

    def __post_init__(self):
        self.j1 = np.asarray(self.j1, dtype=float)
        self.j2 = np.asarray(self.j2, dtype=float)
        self.x_star = np.asarray(self.x_star, dtype=float)
        n = self.j1.shape[0]
        if self.j1.shape != (n, n) or self.j2.shape != (n, n):
            raise ConfigError("j1/j2 must be square n x n matrices")
        if np.any(self.j2 + self.j2.T != 0.0):
            raise ConfigError("j2 must be exactly skew-symmetric")
        if self.x_star.shape != (2 * n,):
            raise ConfigError("x_star dimension must be 2n")
        if np.any(self.x_star[n:] != 0.0):
            raise ConfigError("x_star must have zero momentum")
        if not self.c_transient > 0:
            raise ConfigError("c_transient must be > 0")
        if not self.c_lyap > 0:
            raise ConfigError("c_lyap must be > 0")
        if self.lambda_comp < 0:
            raise ConfigError("lambda_comp must be >= 0")
        if self.kp_comp is None:
            self.kp_comp = np.eye(n)
        self.kp_comp = np.asarray(self.kp_comp, dtype=float)
        try:
            numerics.cholesky(self.kp_comp)
        except numerics.SingularMatrixError as err:
            raise ConfigError(f"kp_comp must be SPD: {err}") from err

    @property
    def n(self):
        return self.j1.shape[0]

    def j_aux(self):
        n = self.n
        ja = np.zeros((2 * n, 2 * n))
        ja[:n, n:] = self.j1
        ja[n:, :n] = -self.j1.T
        ja[n:, n:] = self.j2
        return ja

    def j_desired(self):
        n = self.n
        j = np.zeros((2 * n, 2 * n))
        j[:n, n:] = np.eye(n)
        j[n:, :n] = -np.eye(n)
        return j + self.j_aux()


def tri_count(n):
    return n * (n + 1) // 2


class SurrogateNet:
    """Dense tanh network with flat parameter vector and jet evaluation.

    Inputs are affinely normalized (`in_center`, `in_scale`) before the
    first layer; derivative outputs are reported in raw input units via the
    jet seeds, so callers never see the rescaling.
    """

    def __init__(self, widths, theta, seed, eps=1e-6, in_center=None, in_scale=None,
                 energy_scale=1.0):
        widths = tuple(int(w) for w in widths)
        if any(w <= 0 for w in widths):
            raise ConfigError(f"zero or negative layer width in {widths}")
        if widths[0] % 2 != 0:
            raise ConfigError("input width must be 2n")
        n = widths[0] // 2
        if widths[-1] != 1 + tri_count(n):
            raise ConfigError(
                f"output width must be 1 + n(n+1)/2 = {1 + tri_count(n)}"
            )
        self.widths = widths
        self.n = n
        self.eps = float(eps)
        self.seed = int(seed)
        self.in_center = (
            np.zeros(widths[0]) if in_center is None
            else np.asarray(in_center, dtype=float)
        )
        self.in_scale = (
            np.ones(widths[0]) if in_scale is None
            else np.asarray(in_scale, dtype=float)
        )
        if self.in_center.shape != (widths[0],) or self.in_scale.shape != (widths[0],):
            raise ConfigError("in_center/in_scale must have input dimension")
        if np.any(self.in_scale <= 0):
            raise ConfigError("in_scale entries must be positive")
        if energy_scale <= 0:
            raise ConfigError("energy_scale must be positive")
        # raw energy-head outputs stay O(1); this fixed factor carries the
        # physical energy magnitude, which keeps the least-squares terms
        # well conditioned
        self.energy_scale = float(energy_scale)
        self._out_gain = np.ones(widths[-1])
        self._out_gain[0] = self.energy_scale
        self.shapes = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.shapes.append((fan_out, fan_in))
            self.shapes.append((fan_out,))
        self.size = sum(int(np.prod(s)) for s in self.shapes)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ConfigError(f"theta size {theta.shape} != ({self.size},)")
        if not np.all(np.isfinite(theta)):
            raise ConfigError("theta has non-finite entries")
        self.theta = theta.copy()

    # -- construction --------------------------------------------------------
    @classmethod
    def init(cls, seed, widths, eps=1e-6, damping_bias=1.0, in_center=None,
             in_scale=None, energy_scale=1.0):
        """Deterministic Xavier-uniform weights; output layer zeroed.

        Zero output weights start training at auxiliary energy 0.  The
        damping factor cannot start at exactly L = 0: the Gram product
        L L^T has zero parameter gradient there (a saddle that freezes the
        transient term), so the diagonal entries of L get a constant bias,
        i.e. the initial damping block is (damping_bias^2 + eps) I.
        """
        widths = tuple(int(w) for w in widths)
        rng = np.random.default_rng(seed)
        pieces = []
        n_layers = len(widths) - 1
        n = widths[0] // 2
        for li, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            if li == n_layers - 1:
                w[:] = 0.0
                rows, cols = np.tril_indices(n)
                b[1 + np.flatnonzero(rows == cols)] = damping_bias
            pieces.append(w.ravel())
            pieces.append(b)
        return cls(
            widths,
            np.concatenate(pieces),
            seed=seed,
            eps=eps,
            in_center=in_center,
            in_scale=in_scale,
            energy_scale=energy_scale,
        )

    # -- parameter views ------------------------------------------------------
    def layer_arrays(self):
        out = []
        ofs = 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(self.theta[ofs : ofs + size].reshape(shape))
            ofs += size
        return out

    def graph_params(self):
        arrays = self.layer_arrays()
        params = []
        for i, arr in enumerate(arrays):
            tag = f"w{i // 2}" if i % 2 == 0 else f"b{i // 2}"
            params.append(ad.Param(arr, name=tag))
        return params

    def set_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ConfigError(f"theta size {theta.shape} != ({self.size},)")
        self.theta = theta.copy()

    # -- evaluation ------------------------------------------------------------
    def graph_forward(self, params, x_batch, order=2):
        """Stacked-jet forward pass as graph nodes; returns (B, C, out)."""
        spec = ad.JetSpec(2 * self.n, order=order)
        node = ad.const(
            spec.seed(np.atleast_2d(x_batch), self.in_center, self.in_scale),
            kind="jet_seed",
        )
        n_layers = len(self.widths) - 1
        for li in range(n_layers):
            node = ad.jet_linear(node, params[2 * li], params[2 * li + 1])
            if li < n_layers - 1:
                node = ad.jet_tanh(node, spec)
        if self.energy_scale != 1.0:
            node = ad.mul(node, ad.const(self._out_gain))
        return node, spec

    def numeric_forward(self, x, order=1):
        """Plain numpy jet forward at one state; no graph.

        Returns (val (out,), first (k, out), second (k2, out)); the higher
        pieces are None below the requested order.
        """
        x = np.asarray(x, dtype=float)
        k = 2 * self.n
        arrays = self.layer_arrays()
        a = (x - self.in_center) * self.in_scale
        a1 = np.diag(self.in_scale) if order >= 1 else None
        iu, ju = ad._pairs(k)
        a2 = np.zeros((len(iu), k)) if order >= 2 else None
        n_layers = len(self.widths) - 1
        for li in range(n_layers):
            w, b = arrays[2 * li], arrays[2 * li + 1]
            z = a @ w.T + b
            z1 = a1 @ w.T if order >= 1 else None
            z2 = a2 @ w.T if order >= 2 else None
            if li < n_layers - 1:
                t = np.tanh(z)
                g1 = 1.0 - t * t
                a = t
                if order >= 1:
                    a1 = g1[None, :] * z1
                if order >= 2:
                    g2 = -2.0 * t * g1
                    ff = z1[iu] * z1[ju]
                    a2 = g1[None, :] * z2 + g2[None, :] * ff
            else:
                a, a1, a2 = z, z1, z2
        if self.energy_scale != 1.0:
            a = a * self._out_gain
            if order >= 1:
                a1 = a1 * self._out_gain
            if order >= 2:
                a2 = a2 * self._out_gain
        return a, a1, a2


def init(seed, widths, **kwargs):
    """Fresh surrogate with deterministic weights for a fixed seed."""
    return SurrogateNet.init(seed, widths, **kwargs)


def eval_Ha(net, x):
    """Auxiliary energy and its state gradient / Hessian at one state."""
    val, first, second = net.numeric_forward(x, order=2)
    k = 2 * net.n
    iu, ju = ad._pairs(k)
    hess = np.zeros((k, k))
    hess[iu, ju] = second[:, 0]
    hess[ju, iu] = second[:, 0]
    return float(val[0]), first[:, 0].copy(), hess


def eval_R2(net, x):
    """Trained damping block L L^T + eps I at one state (SPD for any theta)."""
    val, _, _ = net.numeric_forward(x, order=0)
    return r2_from_lvals(val[1:], net.n, net.eps)


def r2_from_lvals(lvals, n, eps):
    l = np.zeros((n, n))
    l[np.tril_indices(n)] = lvals
    return l @ l.T + eps * np.eye(n)


def assemble(net, ds, sys, x):
    """Desired closed-loop quantities at one state.

    Returns (J_d, R_d, dH_d/dx, d2H_d/dx2, F_d) with J_d skew-symmetric by
    construction and R_d = blockdiag(0, D + R2) positive semi-definite.
    """
    x = np.asarray(x, dtype=float)
    n = sys.n
    s = 2 * n
    ha, ha1, ha2 = eval_Ha(net, x)
    _, dh, d2h = ph_core.hamiltonian_derivatives(sys, x)
    jd = ds.j_desired()
    rd = np.zeros((s, s))
    rd[n:, n:] = sys.dissipation(x) + eval_R2(net, x)
    dhd = dh + ha1
    d2hd = d2h + ha2
    return jd, rd, dhd, d2hd, jd - rd


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_payload(net, ds, system_name, system_params, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "widths": list(net.widths),
        "seed": net.seed,
        "eps": net.eps,
        "system": {"name": system_name, "params": dict(system_params)},
        "in_center": net.in_center.tolist(),
        "in_scale": net.in_scale.tolist(),
        "energy_scale": net.energy_scale,
        "desired": {
            "j1": ds.j1.tolist(),
            "j2": ds.j2.tolist(),
            "x_star": ds.x_star.tolist(),
            "c_transient": ds.c_transient,
            "c_lyap": ds.c_lyap,
            "lambda_comp": ds.lambda_comp,
            "kp_comp": ds.kp_comp.tolist(),
        },
        "theta": net.theta.tolist(),
    }
    if extra:
        payload["extra"] = extra
    return payload


def save_checkpoint(path, net, ds, system_name, system_params, extra=None):
    payload = checkpoint_payload(net, ds, system_name, system_params, extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (net, ds, system, payload).

    Decimal float round-tripping through JSON is exact, so a reloaded net
    reproduces losses bit for bit.
    """
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a checkpoint file: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    net = SurrogateNet(
        payload["widths"],
        np.asarray(payload["theta"], dtype=float),
        seed=payload["seed"],
        eps=payload["eps"],
        in_center=payload.get("in_center"),
        in_scale=payload.get("in_scale"),
        energy_scale=payload.get("energy_scale", 1.0),
    )
    d = payload["desired"]
    ds = DesiredStructure(
        j1=d["j1"],
        j2=d["j2"],
        x_star=d["x_star"],
        c_transient=d["c_transient"],
        c_lyap=d["c_lyap"],
        lambda_comp=d["lambda_comp"],
        kp_comp=d["kp_comp"],
    )
    sysinfo = payload["system"]
    system = ph_core.make_system(sysinfo["name"], sysinfo["params"])
    return net, ds, system, payload
