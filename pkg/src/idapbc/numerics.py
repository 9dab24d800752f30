"""Small dense linear algebra for state-space matrices of dimension <= 8.

Eigenvalues of the (possibly non-symmetric) closed-loop structure matrices
are computed from the characteristic polynomial with closed-form quadratic /
quartic root finding, so that loss values are bit-reproducible and free of
iterative-solver nondeterminism.  Symmetric spectra use cyclic Jacobi
rotations.  Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import numpy as np

SYMMETRY_TOL = 1e-10


class NonFiniteInputError(ValueError):
    """Input matrix or vector contains NaN or Inf entries."""


class UnsupportedDimensionError(ValueError):
    """Matrix dimension outside the supported range for this routine."""


class SingularMatrixError(ValueError):
    """Cholesky pivot failed; carries the offending pivot index."""

    def __init__(self, pivot_index, pivot_value):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        super().__init__(
            f"matrix not positive definite: pivot {pivot_index} = {pivot_value:.3e}"
        )


def _as_square(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInputError(f"{name} has non-finite entries")
    return a


# ---------------------------------------------------------------------------
# symmetric eigenproblem (cyclic Jacobi)
# ---------------------------------------------------------------------------

def sym_eigen(a):
    """Eigendecomposition of a symmetric matrix, d <= 8.

    The input must be symmetric within 1e-10 (it is symmetrized by
    (A + A^T)/2 before the sweep; larger asymmetry is an error, not a silent
    fix).  Returns (eigenvalues ascending, orthonormal eigenvector columns).
    """
    a = _as_square(a)
    d = a.shape[0]
    if d > 8:
        raise UnsupportedDimensionError(f"sym_eigen supports d <= 8, got {d}")
    asym = np.max(np.abs(a - a.T))
    scale = max(1.0, np.max(np.abs(a)))
    if asym > SYMMETRY_TOL * scale:
        raise ValueError(f"matrix asymmetry {asym:.3e} exceeds tolerance")
    w, v = _jacobi(0.5 * (a + a.T))
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def _jacobi(a, max_sweeps=30):
    d = a.shape[0]
    a = a.copy()
    v = np.eye(d)
    if d == 1:
        return a[0].copy(), v
    scale = max(np.max(np.abs(a)), 1e-300)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= 1e-16 * scale:
                    continue
                off = max(off, abs(apq))
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.hypot(1.0, tau)) if tau != 0 else 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                rot = np.eye(d)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
        if off <= 1e-15 * scale:
            break
    return np.diag(a).copy(), v


def jacobi_eigh_batch(a, max_sweeps=16):
    """Vectorized cyclic Jacobi over a stack of symmetric matrices (B, d, d).

    Returns (eigenvalues (B, d) ascending, eigenvectors (B, d, d) with
    columns matching the eigenvalue order).  Inputs are symmetrized.
    """
    a = np.asarray(a, dtype=float)
    b, d, _ = a.shape
    a = 0.5 * (a + a.transpose(0, 2, 1)).copy()
    v = np.broadcast_to(np.eye(d), (b, d, d)).copy()
    if d == 1:
        return a[:, :, 0].copy(), v
    scale = np.maximum(np.abs(a).max(axis=(1, 2)), 1e-300)
    scale_max = float(scale.max())
    pairs = [(p, q) for p in range(d - 1) for q in range(p + 1, d)]
    for _ in range(max_sweeps):
        off = 0.0
        for p, q in pairs:
            apq = a[:, p, q]
            off = max(off, float(np.abs(apq).max()))
            active = np.abs(apq) > 1e-18 * scale
            if not active.any():
                continue
            app = a[:, p, p]
            aqq = a[:, q, q]
            safe = np.where(active, apq, 1.0)
            tau = (aqq - app) / (2.0 * safe)
            t = np.where(
                tau == 0.0, 1.0, np.sign(tau) / (np.abs(tau) + np.hypot(1.0, tau))
            )
            t = np.where(active, t, 0.0)
            c = 1.0 / np.hypot(1.0, t)
            s = t * c
            # two-sided rotation on rows/cols p, q
            rp = c[:, None] * a[:, p, :] - s[:, None] * a[:, q, :]
            rq = s[:, None] * a[:, p, :] + c[:, None] * a[:, q, :]
            a[:, p, :] = rp
            a[:, q, :] = rq
            cp = c[:, None] * a[:, :, p] - s[:, None] * a[:, :, q]
            cq = s[:, None] * a[:, :, p] + c[:, None] * a[:, :, q]
            a[:, :, p] = cp
            a[:, :, q] = cq
            vp = c[:, None] * v[:, :, p] - s[:, None] * v[:, :, q]
            vq = s[:, None] * v[:, :, p] + c[:, None] * v[:, :, q]
            v[:, :, p] = vp
            v[:, :, q] = vq
        if off <= 1e-15 * scale_max:
            break
    w = np.einsum("bii->bi", a).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return w, v


# ---------------------------------------------------------------------------
# characteristic polynomial and general eigenvalues (d in {2, 4})
# ---------------------------------------------------------------------------

def char_poly_batch(a):
    """Monic characteristic polynomial coefficients via Faddeev-LeVerrier.

    For a stack (B, d, d) returns (coeffs (B, d+1) with coeffs[:, 0] = 1,
    aux) where aux holds the recursion matrices M_0..M_{d-1}; the resolvent
    adjugate adj(lam*I - A) equals sum_k lam^(d-1-k) M_k, which the
    eigenvalue adjoint uses.
    """
    a = np.asarray(a, dtype=float)
    b, d, _ = a.shape
    eye = np.broadcast_to(np.eye(d), (b, d, d))
    ms = [np.array(eye, copy=True)]
    coeffs = np.empty((b, d + 1))
    coeffs[:, 0] = 1.0
    m = eye
    for k in range(1, d + 1):
        t = a @ m
        ck = -np.einsum("bii->b", t) / k
        coeffs[:, k] = ck
        m = t + ck[:, None, None] * eye
        if k < d:
            ms.append(np.array(m, copy=True))
    return coeffs, ms


def _poly_eval(coeffs, lam):
    # coeffs (B, d+1) monic-first; lam (B, d) complex -> p(lam), p'(lam)
    b, dp1 = coeffs.shape
    p = np.zeros_like(lam)
    dp = np.zeros_like(lam)
    for k in range(dp1):
        dp = dp * lam + p
        p = p * lam + coeffs[:, k][:, None]
    return p, dp


def _cubic_largest_real_root(b2, b1, b0):
    """Largest real root of t^3 + b2 t^2 + b1 t + b0 = 0, vectorized."""
    p = b1 - b2 * b2 / 3.0
    q = 2.0 * b2**3 / 27.0 - b2 * b1 / 3.0 + b0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    root = np.empty_like(b2)

    pos = disc >= 0.0
    if pos.any():
        sq = np.sqrt(disc[pos])
        u = np.cbrt(-q[pos] / 2.0 + sq)
        v = np.cbrt(-q[pos] / 2.0 - sq)
        root[pos] = u + v
    neg = ~pos
    if neg.any():
        pn = p[neg]
        qn = q[neg]
        # three real roots; take k giving the maximum
        rho = np.sqrt(-pn**3 / 27.0)
        theta = np.arccos(np.clip(-qn / (2.0 * rho), -1.0, 1.0))
        mag = 2.0 * np.sqrt(-pn / 3.0)
        cands = [mag * np.cos((theta + 2.0 * np.pi * k) / 3.0) for k in range(3)]
        root[neg] = np.max(np.stack(cands, axis=0), axis=0)
    return root - b2 / 3.0


def _quadratic_roots(tb, tc):
    """Roots of y^2 + tb y + tc with real coefficients, exact conjugates."""
    disc = tb * tb - 4.0 * tc
    sq = np.sqrt(np.abs(disc))
    re = np.where(disc >= 0, 0.0, -tb / 2.0)
    r1 = np.where(disc >= 0, (-tb - sq) / 2.0, re) + 1j * np.where(disc >= 0, 0.0, -sq / 2.0)
    r2 = np.where(disc >= 0, (-tb + sq) / 2.0, re) + 1j * np.where(disc >= 0, 0.0, sq / 2.0)
    return r1, r2


def quartic_roots_batch(coeffs, polish=3):
    """All roots of monic real quartics (B, 5), conjugate pairs exact.

    Ferrari's factorization through the resolvent cubic, followed by a few
    Newton corrections on the original quartic.  Roots are sorted by
    (Re, Im) ascending.
    """
    a3 = coeffs[:, 1]
    a2 = coeffs[:, 2]
    a1 = coeffs[:, 3]
    a0 = coeffs[:, 4]
    # depressed quartic y^4 + p y^2 + q y + r, lam = y - a3/4
    sh = a3 / 4.0
    p = a2 - 3.0 * a3 * a3 / 8.0
    q = a1 - a3 * a2 / 2.0 + a3**3 / 8.0
    r = a0 - a3 * a1 / 4.0 + a3 * a3 * a2 / 16.0 - 3.0 * a3**4 / 256.0

    m = _cubic_largest_real_root(p, p * p / 4.0 - r, -q * q / 8.0)
    m = np.maximum(m, 0.0)
    two_m = 2.0 * m
    use_biquad = two_m < 1e-13

    roots = np.empty((coeffs.shape[0], 4), dtype=complex)

    gen = ~use_biquad
    if gen.any():
        s = np.sqrt(two_m[gen])
        half = p[gen] / 2.0 + m[gen]
        shift = q[gen] / (2.0 * s)
        r1, r2 = _quadratic_roots(s, half - shift)
        r3, r4 = _quadratic_roots(-s, half + shift)
        roots[gen, 0], roots[gen, 1], roots[gen, 2], roots[gen, 3] = r1, r2, r3, r4
    if use_biquad.any():
        # q ~ 0: y^4 + p y^2 + r, solve as quadratic in y^2
        z1, z2 = _quadratic_roots(p[use_biquad], r[use_biquad])
        s1 = np.sqrt(z1)
        s2 = np.sqrt(z2)
        roots[use_biquad, 0], roots[use_biquad, 1] = s1, -s1
        roots[use_biquad, 2], roots[use_biquad, 3] = s2, -s2

    roots = roots - sh[:, None]

    for _ in range(polish):
        pv, dv = _poly_eval(coeffs, roots)
        ok = np.abs(dv) > 1e-8
        step = np.where(ok, pv / np.where(ok, dv, 1.0), 0.0)
        roots = roots - step

    roots = _canonical_conjugates(roots)
    order = np.lexsort((roots.imag, roots.real), axis=-1)
    return np.take_along_axis(roots, order, axis=1)


def _canonical_conjugates(roots):
    """Snap near-conjugate root sets of a real polynomial to exact pairs."""
    out = roots.copy()
    b, d = roots.shape
    scale = np.maximum(np.abs(roots).max(axis=1), 1.0)
    tiny = 1e-12 * scale
    imag_mag = np.abs(roots.imag)
    # treat negligible imaginary parts as real
    out.imag[imag_mag < tiny[:, None]] = 0.0
    # pair remaining complex roots greedily by nearest conjugate; all-real
    # rows (the common case for damped spectra) skip the python loop
    complex_rows = np.flatnonzero((out.imag != 0.0).any(axis=1))
    for i in complex_rows:
        idx = [k for k in range(d) if out[i, k].imag != 0.0]
        used = set()
        for k in idx:
            if k in used:
                continue
            best, bdist = None, np.inf
            for j in idx:
                if j == k or j in used:
                    continue
                dist = abs(out[i, j] - np.conj(out[i, k]))
                if dist < bdist:
                    best, bdist = j, dist
            if best is None:
                out[i, k] = complex(out[i, k].real, 0.0)
                used.add(k)
                continue
            re = 0.5 * (out[i, k].real + out[i, best].real)
            im = 0.5 * (abs(out[i, k].imag) + abs(out[i, best].imag))
            sgn = 1.0 if out[i, k].imag > 0 else -1.0
            out[i, k] = complex(re, sgn * im)
            out[i, best] = complex(re, -sgn * im)
            used.update((k, best))
    return out


def eigvals_batch(a):
    """Eigenvalues of a stack of real matrices, d in {2, 4}.

    Returns (values (B, d) complex sorted by (Re, Im), char_coeffs, ms)
    where char_coeffs/ms come from char_poly_batch for adjoint reuse.
    """
    a = np.asarray(a, dtype=float)
    b, d, _ = a.shape
    if d not in (2, 4):
        raise UnsupportedDimensionError(f"eigvals_batch supports d in {{2, 4}}, got {d}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInputError("matrix stack has non-finite entries")
    scale = np.maximum(np.abs(a).max(axis=(1, 2)), 1e-30)
    a_s = a / scale[:, None, None]
    coeffs, ms = char_poly_batch(a_s)
    if d == 2:
        r1, r2 = _quadratic_roots(coeffs[:, 1], coeffs[:, 2])
        roots = np.stack([r1, r2], axis=1)
        order = np.lexsort((roots.imag, roots.real), axis=-1)
        roots = np.take_along_axis(roots, order, axis=1)
    else:
        roots = quartic_roots_batch(coeffs)
    # undo scaling; ms/coeffs stay in scaled units, record the scale
    return roots * scale[:, None], coeffs, ms, scale


def general_eigenvalues(a):
    """Complex spectrum of a real matrix, d in {2, 4}, deterministic order.

    Roots of the characteristic polynomial sorted by real part ascending
    (ties by imaginary part); non-real values come in exact conjugate pairs.
    """
    a = _as_square(a)
    if a.shape[0] not in (2, 4):
        raise UnsupportedDimensionError(
            f"general_eigenvalues supports d in {{2, 4}}, got {a.shape[0]}"
        )
    vals, _, _, _ = eigvals_batch(a[None])
    return vals[0]


def eig_adjoints_batch(vals, coeffs, ms, scale, collision_tol=1e-8):
    """d(lambda_i)/dA for each eigenvalue of each stacked matrix.

    Uses the resolvent identity adj(lam I - A) = sum_k lam^(d-1-k) M_k and
    d lam / dA = adj(lam I - A)^T / tr(adj(lam I - A)).  Near-collided
    eigenvalue pairs (|lam_i - lam_j| < collision_tol) get zero gradient:
    the adjoint formula degenerates there and the training loss treats the
    pair as a subgradient no-op.

    Returns grads (B, d, d, d) complex with grads[b, i] = d lam_i / dA_b,
    and a boolean mask (B, d) marking dropped (collided) eigenvalues.
    """
    b, d = vals.shape
    lam_s = vals / scale[:, None]  # eigenvalues in scaled units
    # adjugate of (lam I - A_scaled): sum over k of lam^(d-1-k) * M_k
    adj = np.zeros((b, d, d, d), dtype=complex)
    for k in range(d):
        adj += lam_s[:, :, None, None] ** (d - 1 - k) * ms[k][:, None, :, :]
    trace = np.einsum("bikk->bi", adj)
    dist = np.abs(vals[:, :, None] - vals[:, None, :])
    idx = np.arange(d)
    dist[:, idx, idx] = np.inf
    collided = dist.min(axis=2) < collision_tol * np.maximum(scale[:, None], 1.0)
    safe = np.where(np.abs(trace) < 1e-300, 1.0, trace)
    grads = adj.transpose(0, 1, 3, 2) / safe[:, :, None, None]
    # d lam/dA in original units: lam = scale * lam_s, A = scale * A_s
    grads = np.where(collided[:, :, None, None], 0.0, grads)
    grads[np.abs(trace) < 1e-300] = 0.0
    return grads, collided


# ---------------------------------------------------------------------------
# SPD solve via Cholesky
# ---------------------------------------------------------------------------

def cholesky(a):
    """Lower-triangular Cholesky factor; raises SingularMatrixError with the
    pivot index if a pivot is not strictly positive."""
    a = _as_square(a)
    d = a.shape[0]
    l = np.zeros_like(a)
    for j in range(d):
        s = a[j, j] - np.dot(l[j, :j], l[j, :j])
        if s <= 0.0 or not np.isfinite(s):
            raise SingularMatrixError(j, s)
        l[j, j] = np.sqrt(s)
        for i in range(j + 1, d):
            l[i, j] = (a[i, j] - np.dot(l[i, :j], l[j, :j])) / l[j, j]
    return l


def spd_solve(a, rhs):
    """Solve A x = b for symmetric positive-definite A via Cholesky."""
    a = _as_square(a)
    rhs = np.asarray(rhs, dtype=float)
    l = cholesky(a)
    # forward then back substitution
    y = np.zeros_like(rhs, dtype=float)
    d = a.shape[0]
    for i in range(d):
        y[i] = (rhs[i] - np.dot(l[i, :i], y[:i])) / l[i, i]
    x = np.zeros_like(rhs, dtype=float)
    for i in reversed(range(d)):
        x[i] = (y[i] - np.dot(l[i + 1 :, i], x[i + 1 :])) / l[i, i]
    return x


def is_conjugate_paired(values, tol=1e-9):
    """True when every non-real value has its conjugate in the list."""
    values = np.asarray(values, dtype=complex)
    rem = list(values[np.abs(values.imag) > 0.0])
    while rem:
        v = rem.pop()
        match = None
        for i, w in enumerate(rem):
            if abs(w - np.conj(v)) <= tol * max(1.0, abs(v)):
                match = i
                break
        if match is None:
            return False
        rem.pop(match)
    return True
