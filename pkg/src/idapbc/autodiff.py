"""Differentiation engine.

Two cooperating pieces:

* a numeric second-order jet type (`Jet2`) for first/second derivatives of
  scalar fields with respect to state inputs.  Jet components may be floats
  or numpy arrays, so the same code evaluates one state or a whole batch.

* a reverse-mode graph over numpy arrays (`Node`, `Param`) for gradients of
  scalar losses with respect to network parameters.  State derivatives of
  the surrogate enter the graph as forward-over-forward jet components
  (`jet_linear` / `jet_tanh` propagate value, gradient and packed Hessian
  through dense layers), so a reverse sweep differentiates them with
  respect to the parameters as well.  That nesting is what the equilibrium,
  Lyapunov and matching residuals require.

Reductions run in creation order, so losses and gradients are reproducible
bit for bit.
"""

from __future__ import annotations

import numpy as np

from . import numerics


class GraphEvaluationError(ArithmeticError):
    """A graph value went non-finite; carries the offending node kind."""

    def __init__(self, kind):
        self.kind = kind
        super().__init__(f"non-finite value produced by node of kind '{kind}'")


# ---------------------------------------------------------------------------
# numeric jets (value, k first derivatives, k x k second derivatives)
# ---------------------------------------------------------------------------

class Jet2:
    """Second-order Taylor data of a scalar with respect to k seed directions.

    `first` has shape (k, ...) and `second` (k, k, ...); trailing axes are
    element-wise payload (scalar or batch).  Mixed partials are computed
    once and stored symmetrically, so the Hessian is symmetric by
    construction.
    """

    __slots__ = ("val", "first", "second")

    def __init__(self, val, first, second):
        self.val = val
        self.first = first
        self.second = second

    @staticmethod
    def seed(values, k, index):
        """Jet for input coordinate `index` out of k seed directions."""
        values = np.asarray(values, dtype=float)
        first = np.zeros((k,) + values.shape)
        first[index] = 1.0
        second = np.zeros((k, k) + values.shape)
        return Jet2(values, first, second)

    @staticmethod
    def const(values, k):
        values = np.asarray(values, dtype=float)
        shape = values.shape
        return Jet2(values, np.zeros((k,) + shape), np.zeros((k, k) + shape))

    def _coerce(self, other):
        if isinstance(other, Jet2):
            return other
        k = self.first.shape[0]
        values = np.asarray(other, dtype=float)
        z1 = np.zeros((k,) + np.shape(self.val))
        z2 = np.zeros((k, k) + np.shape(self.val))
        return Jet2(values, z1, z2)

    def __add__(self, other):
        o = self._coerce(other)
        return Jet2(self.val + o.val, self.first + o.first, self.second + o.second)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.val, -self.first, -self.second)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        o = self._coerce(other)
        cross = self.first[:, None] * o.first[None, :]
        return Jet2(
            self.val * o.val,
            self.first * o.val + self.val * o.first,
            self.second * o.val
            + self.val * o.second
            + cross
            + np.swapaxes(cross, 0, 1),
        )

    __rmul__ = __mul__

    def reciprocal(self):
        g = 1.0 / self.val
        g2 = g * g
        outer = self.first[:, None] * self.first[None, :]
        return Jet2(g, -g2 * self.first, -g2 * self.second + 2.0 * g2 * g * outer)

    def __truediv__(self, other):
        return self * self._coerce(other).reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def _unary(self, f, df, d2f):
        outer = self.first[:, None] * self.first[None, :]
        return Jet2(f, df * self.first, df * self.second + d2f * outer)


def _dispatch(x, jet_fn, plain_fn):
    return jet_fn(x) if isinstance(x, Jet2) else plain_fn(x)


def sin(x):
    return _dispatch(
        x, lambda j: j._unary(np.sin(j.val), np.cos(j.val), -np.sin(j.val)), np.sin
    )


def cos(x):
    return _dispatch(
        x, lambda j: j._unary(np.cos(j.val), -np.sin(j.val), -np.cos(j.val)), np.cos
    )


def tanh(x):
    def jf(j):
        t = np.tanh(j.val)
        g = 1.0 - t * t
        return j._unary(t, g, -2.0 * t * g)

    return _dispatch(x, jf, np.tanh)


def exp(x):
    def jf(j):
        e = np.exp(j.val)
        return j._unary(e, e, e)

    return _dispatch(x, jf, np.exp)


def square(x):
    return _dispatch(x, lambda j: j._unary(j.val * j.val, 2.0 * j.val, 2.0), np.square)


def relu(x):
    # max(0, .) with subgradient 0 at the kink
    def jf(j):
        m = (j.val > 0).astype(float)
        return Jet2(np.maximum(j.val, 0.0), m * j.first, m * j.second)

    return _dispatch(x, jf, lambda v: np.maximum(v, 0.0))


def seed_state(x):
    """Jets for every coordinate of a state vector (identity seeding)."""
    x = np.asarray(x, dtype=float)
    k = x.shape[0]
    return [Jet2.seed(x[i], k, i) for i in range(k)]


def input_gradient(f, x):
    """Gradient of a scalar field with respect to its input vector.

    `f` consumes a list of jet scalars and returns a jet; the result is the
    (k,) first-derivative vector at x.
    """
    out = f(seed_state(x))
    return np.asarray(out.first, dtype=float).copy()


def input_hessian(f, x):
    """Symmetric Hessian of a scalar field at x (shape (k, k))."""
    out = f(seed_state(x))
    return np.asarray(out.second, dtype=float).copy()


def value_grad_hess(f, x):
    out = f(seed_state(x))
    return float(out.val), np.asarray(out.first, float).copy(), np.asarray(
        out.second, float
    ).copy()


# ---------------------------------------------------------------------------
# reverse-mode graph over numpy arrays
# ---------------------------------------------------------------------------

def _pairs(k):
    """Packed upper-triangle index pairs for k seed directions."""
    idx = [(i, j) for i in range(k) for j in range(i, k)]
    return np.array([i for i, _ in idx]), np.array([j for _, j in idx])


class Node:
    __slots__ = ("value", "parents", "vjp", "kind", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, kind="leaf", requires_grad=False):
        self.value = np.asarray(value, dtype=float)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.kind = kind
        self.requires_grad = requires_grad or any(
            p.requires_grad for p in self.parents
        )

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    @property
    def shape(self):
        return self.value.shape


class Param(Node):
    """Trainable leaf."""

    def __init__(self, value, name=""):
        super().__init__(value, kind=f"param:{name}", requires_grad=True)
        self.value = np.array(value, dtype=float)


def const(value, kind="const"):
    return Node(value, kind=kind)


def as_node(x):
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (undo numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, value, vjp, kind):
    return Node(value, (a, b), vjp, kind)


def add(a, b):
    a, b = as_node(a), as_node(b)
    return _binary(
        a,
        b,
        a.value + b.value,
        lambda u: (_unbroadcast(u, a.value.shape), _unbroadcast(u, b.value.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return _binary(
        a,
        b,
        a.value - b.value,
        lambda u: (_unbroadcast(u, a.value.shape), _unbroadcast(-u, b.value.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return _binary(
        a,
        b,
        a.value * b.value,
        lambda u: (
            _unbroadcast(u * b.value, a.value.shape),
            _unbroadcast(u * a.value, b.value.shape),
        ),
        "mul",
    )


def div(a, b):
    a, b = as_node(a), as_node(b)
    inv = 1.0 / b.value
    return _binary(
        a,
        b,
        a.value * inv,
        lambda u: (
            _unbroadcast(u * inv, a.value.shape),
            _unbroadcast(-u * a.value * inv * inv, b.value.shape),
        ),
        "div",
    )


def neg(a):
    a = as_node(a)
    return Node(-a.value, (a,), lambda u: (-u,), "neg")


def _unary(a, value, dvalue, kind):
    return Node(value, (a,), lambda u: (u * dvalue,), kind)


def sin_n(a):
    a = as_node(a)
    return _unary(a, np.sin(a.value), np.cos(a.value), "sin")


def cos_n(a):
    a = as_node(a)
    return _unary(a, np.cos(a.value), -np.sin(a.value), "cos")


def exp_n(a):
    a = as_node(a)
    e = np.exp(a.value)
    return _unary(a, e, e, "exp")


def tanh_n(a):
    a = as_node(a)
    t = np.tanh(a.value)
    return _unary(a, t, 1.0 - t * t, "tanh")


def square_n(a):
    a = as_node(a)
    return _unary(a, a.value * a.value, 2.0 * a.value, "square")


def relu_n(a):
    a = as_node(a)
    return _unary(a, np.maximum(a.value, 0.0), (a.value > 0).astype(float), "relu")


def sqrt0(a):
    """sqrt with subgradient 0 at 0 (used for the L2 norm of a spectrum)."""
    a = as_node(a)
    r = np.sqrt(np.maximum(a.value, 0.0))
    safe = np.where(r > 0.0, r, 1.0)
    dv = np.where(r > 0.0, 0.5 / safe, 0.0)
    return _unary(a, r, dv, "sqrt0")


def sum_node(a, axis=None):
    a = as_node(a)
    val = a.value.sum(axis=axis)

    def vjp(u):
        if axis is None:
            return (np.broadcast_to(u, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(u, axis), a.value.shape).copy(),)

    return Node(val, (a,), vjp, "sum")


def mean_node(a, axis=None):
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum_node(a, axis=axis), 1.0 / count)


def scale(a, c):
    a = as_node(a)
    return _unary(a, a.value * c, c, "scale")


def getitem(a, key):
    a = as_node(a)

    def vjp(u):
        g = np.zeros_like(a.value)
        g[key] = u
        return (g,)

    return Node(a.value[key], (a,), vjp, "slice")


def matmul_const(c, a):
    """(m, s) constant matrix times batched vectors (B, s) -> (B, m)."""
    a = as_node(a)
    c = np.asarray(c, dtype=float)
    return Node(a.value @ c.T, (a,), lambda u: (u @ c,), "matmul_const")


def bmatvec(m, v):
    """Batched matrix-vector product (B, s, s) x (B, s) -> (B, s)."""
    m, v = as_node(m), as_node(v)
    val = np.einsum("bij,bj->bi", m.value, v.value)

    def vjp(u):
        return (
            np.einsum("bi,bj->bij", u, v.value),
            np.einsum("bij,bi->bj", m.value, u),
        )

    return _binary(m, v, val, vjp, "bmatvec")


def gram(l):
    """Batched L L^T for (B, n, n) lower-triangular factors."""
    l = as_node(l)
    val = np.einsum("bik,bjk->bij", l.value, l.value)

    def vjp(u):
        return (np.einsum("bij,bjk->bik", u + u.transpose(0, 2, 1), l.value),)

    return Node(val, (l,), vjp, "gram")


def tril_unpack(vals, n):
    """Packed lower-triangle entries (B, n(n+1)/2) -> (B, n, n)."""
    vals = as_node(vals)
    rows, cols = np.tril_indices(n)
    b = vals.value.shape[0]
    full = np.zeros((b, n, n))
    full[:, rows, cols] = vals.value
    return Node(full, (vals,), lambda u: (u[:, rows, cols],), "tril_unpack")


def unpack_sym(packed, k):
    """Packed symmetric second-derivative entries (B, k(k+1)/2) -> (B, k, k)."""
    packed = as_node(packed)
    iu, ju = _pairs(k)
    b = packed.value.shape[0]
    full = np.zeros((b, k, k))
    full[:, iu, ju] = packed.value
    full[:, ju, iu] = packed.value

    def vjp(u):
        g = u[:, iu, ju] + np.where(iu != ju, u[:, ju, iu], 0.0)
        return (g,)

    return Node(full, (packed,), vjp, "unpack_sym")


def embed_pp(block, s):
    """Place an (B, n, n) block at the lower-right of a zero (B, s, s)."""
    block = as_node(block)
    b, n, _ = block.value.shape
    full = np.zeros((b, s, s))
    full[:, s - n :, s - n :] = block.value
    return Node(full, (block,), lambda u: (u[:, s - n :, s - n :],), "embed_pp")


# -- dense-layer jet propagation -------------------------------------------

def jet_linear(x, w, b):
    """Dense layer applied to stacked jet components (B, C, fan_in).

    The weight acts on every component; the bias only shifts the value
    component (row 0).
    """
    x, w, b = as_node(x), as_node(w), as_node(b)
    bsz, comps, fan_in = x.value.shape
    fan_out = w.value.shape[0]
    # one flat GEMM instead of a batched small-matrix product
    val = (x.value.reshape(-1, fan_in) @ w.value.T).reshape(bsz, comps, fan_out)
    val[:, 0, :] += b.value

    def vjp(u):
        u2 = u.reshape(-1, fan_out)
        gx = (u2 @ w.value).reshape(bsz, comps, fan_in)
        gw = u2.T @ x.value.reshape(-1, fan_in)
        gb = u[:, 0, :].sum(axis=0)
        return (gx, gw, gb)

    return Node(val, (x, w, b), vjp, "jet_linear")


class JetSpec:
    """Component layout for stacked jets: [value, k firsts, packed seconds]."""

    def __init__(self, k, order=2):
        self.k = k
        self.order = order
        self.iu, self.ju = _pairs(k)
        self.n2 = len(self.iu) if order == 2 else 0
        self.components = 1 + k + self.n2

    def seed(self, x, center=None, scale=None):
        """Stacked jet input (B, C, k) for batch states x (B, k).

        With `center`/`scale` the value channel is the affinely rescaled
        input and the first-derivative seeds are diag(scale), so all later
        derivative channels come out in the units of the raw input.
        """
        x = np.asarray(x, dtype=float)
        b, k = x.shape
        out = np.zeros((b, self.components, k))
        if center is not None:
            x = x - center
        if scale is not None:
            x = x * scale
            out[:, 1 : 1 + k, :] = np.diag(scale)
        else:
            out[:, 1 : 1 + k, :] = np.eye(k)
        out[:, 0, :] = x
        return out


def jet_tanh(x, spec):
    """tanh through stacked jet components with hand-derived reverse rule.

    Pair products are written slice by slice (k <= 4) to avoid fancy-index
    copies; this sits on the training hot path.
    """
    x = as_node(x)
    k, iu, ju = spec.k, spec.iu, spec.ju
    v = x.value[:, 0, :]
    f = x.value[:, 1 : 1 + k, :]
    t = np.tanh(v)
    g1 = 1.0 - t * t
    g2 = -2.0 * t * g1
    out = np.empty_like(x.value)
    out[:, 0, :] = t
    np.multiply(g1[:, None, :], f, out=out[:, 1 : 1 + k, :])
    if spec.order == 2:
        s = x.value[:, 1 + k :, :]
        ff = np.empty_like(s)
        for a in range(spec.n2):
            np.multiply(f[:, iu[a], :], f[:, ju[a], :], out=ff[:, a, :])
        sec = out[:, 1 + k :, :]
        np.multiply(g1[:, None, :], s, out=sec)
        sec += g2[:, None, :] * ff
    else:
        ff = s = None

    def vjp(u):
        uv = u[:, 0, :]
        uf = u[:, 1 : 1 + k, :]
        g = np.empty_like(x.value)
        # value channel: d t / dv = g1; first channels add g2 * f, etc.
        gv = uv * g1 + (uf * f).sum(axis=1) * g2
        gf = g[:, 1 : 1 + k, :]
        np.multiply(uf, g1[:, None, :], out=gf)
        if spec.order == 2:
            us = u[:, 1 + k :, :]
            g3 = -2.0 * (g1 * g1 + t * g2)
            gv += (us * s).sum(axis=1) * g2 + (us * ff).sum(axis=1) * g3
            np.multiply(us, g1[:, None, :], out=g[:, 1 + k :, :])
            w = us * g2[:, None, :]
            for a in range(spec.n2):
                wa = w[:, a, :]
                gf[:, iu[a], :] += wa * f[:, ju[a], :]
                gf[:, ju[a], :] += wa * f[:, iu[a], :]
        g[:, 0, :] = gv
        return (g,)

    return Node(out, (x,), vjp, "jet_tanh")


# -- spectra as graph nodes --------------------------------------------------

def sym_eigvals_node(a):
    """Ascending eigenvalues (B, s) of symmetric stacks; reverse rule
    v_i v_i^T per eigenvalue."""
    a = as_node(a)
    w, v = numerics.jacobi_eigh_batch(a.value)

    def vjp(u):
        g = np.einsum("bi,bpi,bqi->bpq", u, v, v)
        return (0.5 * (g + g.transpose(0, 2, 1)),)

    return Node(w, (a,), vjp, "sym_eigvals")


def eig_re_im(a, collision_tol=1e-8):
    """Real and imaginary spectra (B, s) of general real stacks.

    Gradients use the resolvent adjoint for simple eigenvalues; near a
    collision (within `collision_tol`) the pair's gradient contribution is
    dropped.
    """
    a = as_node(a)
    vals, coeffs, ms, scl = numerics.eigvals_batch(a.value)
    cache = {}

    def grads():
        if "g" not in cache:
            cache["g"], _ = numerics.eig_adjoints_batch(
                vals, coeffs, ms, scl, collision_tol
            )
        return cache["g"]

    def vjp_re(u):
        return (np.einsum("bi,bipq->bpq", u, grads().real),)

    def vjp_im(u):
        return (np.einsum("bi,bipq->bpq", u, grads().imag),)

    re = Node(vals.real.copy(), (a,), vjp_re, "eig_re")
    im = Node(vals.imag.copy(), (a,), vjp_im, "eig_im")
    return re, im


# -- reverse sweep -----------------------------------------------------------

def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Adjoints of every grad-requiring node reachable from a scalar root."""
    if root.value.size != 1:
        raise ValueError("backward expects a scalar root")
    if not np.isfinite(root.value).all():
        for node in _toposort(root):
            if not np.isfinite(node.value).all():
                raise GraphEvaluationError(node.kind)
        raise GraphEvaluationError(root.kind)
    adj = {id(root): np.ones_like(root.value)}
    for node in reversed(_toposort(root)):
        u = adj.get(id(node))
        if u is None:
            continue
        if node.vjp is None:
            continue  # leaf: keep its adjoint in the result
        for parent, g in zip(node.parents, node.vjp(u)):
            if not parent.requires_grad or g is None:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + g
            else:
                adj[key] = g
        adj.pop(id(node))
    return adj


def grad_params(loss, params):
    """Flat gradient of a scalar loss node with respect to listed Params."""
    # re-run a sweep keeping leaf adjoints
    if loss.value.size != 1:
        raise ValueError("grad_params expects a scalar loss")
    if not np.isfinite(loss.value).all():
        for node in _toposort(loss):
            if not np.isfinite(node.value).all():
                raise GraphEvaluationError(node.kind)
        raise GraphEvaluationError(loss.kind)
    adj = {id(loss): np.ones_like(loss.value)}
    keep = {id(p) for p in params}
    for node in reversed(_toposort(loss)):
        u = adj.get(id(node))
        if u is None or node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(u)):
            if not parent.requires_grad or g is None:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + g
            else:
                adj[key] = g
        if id(node) not in keep:
            adj.pop(id(node), None)
    pieces = []
    for p in params:
        g = adj.get(id(p))
        pieces.append(np.zeros_like(p.value).ravel() if g is None else g.ravel())
    return np.concatenate(pieces) if pieces else np.zeros(0)
