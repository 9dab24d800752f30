import numpy as np
import pytest

from idapbc import autodiff as ad


def fd_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestParamGradients:
    def test_square(self):
        th = ad.Param(np.array(3.0))
        loss = ad.square_n(th)
        g = ad.grad_params(loss, [th])
        assert np.allclose(g, [6.0])

    def test_tanh_at_zero(self):
        th = ad.Param(np.array(0.0))
        g = ad.grad_params(ad.tanh_n(th), [th])
        assert np.allclose(g, [1.0])

    def test_bilinear(self):
        a = ad.Param(np.array(2.0))
        b = ad.Param(np.array(5.0))
        g = ad.grad_params(a * b, [a, b])
        assert np.allclose(g, [5.0, 2.0])

    def test_division_and_exp(self):
        a = ad.Param(np.array(1.5))
        b = ad.Param(np.array(0.5))
        loss = ad.exp_n(a / b)

        def f(v):
            return np.exp(v[0] / v[1])

        ref = fd_grad(f, [1.5, 0.5])
        a2, b2 = ad.Param(np.array(1.5)), ad.Param(np.array(0.5))
        g = ad.grad_params(ad.exp_n(a2 / b2), [a2, b2])
        assert np.allclose(g, ref, rtol=1e-6)

    def test_composite_matches_fd(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            x0 = rng.normal(size=4)

            def build(v):
                p = ad.Param(v)
                t = ad.sin_n(ad.getitem(p, 0)) * ad.cos_n(ad.getitem(p, 1))
                u = ad.tanh_n(ad.getitem(p, 2) * ad.getitem(p, 3))
                return ad.square_n(t + u) + ad.relu_n(ad.getitem(p, 0)), p

            loss, p = build(x0)
            g = ad.grad_params(loss, [p])

            def f(v):
                t = np.sin(v[0]) * np.cos(v[1])
                u = np.tanh(v[2] * v[3])
                return (t + u) ** 2 + max(v[0], 0.0)

            ref = fd_grad(f, x0)
            denom = np.maximum(np.abs(ref), 1e-8)
            mask = np.abs(ref) > 1e-8
            assert np.all(np.abs(g - ref)[mask] / denom[mask] < 1e-5)

    def test_nonfinite_reports_kind(self):
        a = ad.Param(np.array(1.0))
        bad = ad.div(a, ad.const(np.array(0.0)))
        with pytest.raises(ad.GraphEvaluationError) as exc:
            ad.grad_params(bad, [a])
        assert exc.value.kind == "div"

    def test_deterministic_accumulation(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=50)
        p1 = ad.Param(v)
        l1 = ad.sum_node(ad.square_n(ad.sin_n(p1)))
        p2 = ad.Param(v)
        l2 = ad.sum_node(ad.square_n(ad.sin_n(p2)))
        g1 = ad.grad_params(l1, [p1])
        g2 = ad.grad_params(l2, [p2])
        assert np.array_equal(g1, g2)


class TestInputDerivatives:
    def test_norm_squared(self):
        def f(jets):
            return 0.5 * (ad.square(jets[0]) + ad.square(jets[1]))

        g = ad.input_gradient(f, [1.0, 2.0])
        assert np.allclose(g, [1.0, 2.0])
        h = ad.input_hessian(f, [1.0, 2.0])
        assert np.allclose(h, np.eye(2))

    def test_sin(self):
        g = ad.input_gradient(lambda j: ad.sin(j[0]), [0.0])
        assert np.allclose(g, [1.0])

    def test_bilinear_hessian(self):
        def f(jets):
            return jets[0] * jets[1]

        h = ad.input_hessian(f, [0.3, -0.7])
        assert np.allclose(h, [[0.0, 1.0], [1.0, 0.0]])

    def test_pendulum_energy_gradient(self):
        # H = p^2/2 + 9.81 (1 - cos q) at (pi/2, 1)
        def ham(jets):
            q, p = jets
            return 0.5 * ad.square(p) + 9.81 * (1.0 - ad.cos(q)) + 0.0

        g = ad.input_gradient(ham, [np.pi / 2, 1.0])
        assert np.allclose(g, [9.81, 1.0], atol=1e-12)
        h = ad.input_hessian(ham, [0.0, 0.0])
        assert np.allclose(h, np.diag([9.81, 1.0]), atol=1e-12)

    def test_hessian_symmetric(self):
        rng = np.random.default_rng(8)

        def f(jets):
            a = ad.sin(jets[0] * jets[1]) + ad.exp(jets[2] * 0.3)
            return a * a + ad.tanh(jets[0] + jets[2])

        for _ in range(50):
            x = rng.normal(size=3)
            h = ad.input_hessian(f, x)
            assert np.max(np.abs(h - h.T)) <= 1e-12

    def test_matches_fd(self):
        rng = np.random.default_rng(12)

        def f(jets):
            return ad.sin(jets[0]) * ad.tanh(jets[1]) + ad.square(jets[0] / (jets[1] + 3.0))

        def fplain(v):
            return np.sin(v[0]) * np.tanh(v[1]) + (v[0] / (v[1] + 3.0)) ** 2

        for _ in range(100):
            x = rng.normal(size=2)
            g = ad.input_gradient(f, x)
            ref = fd_grad(fplain, x)
            assert np.max(np.abs(g - ref) / np.maximum(np.abs(ref), 1e-4)) < 1e-6

    def test_batched_payload(self):
        # jets carry arrays: same code path evaluates many states at once
        xs = np.linspace(-1, 1, 7)
        k = 1
        j = ad.Jet2.seed(xs, k, 0)
        out = ad.sin(j)
        assert np.allclose(out.val, np.sin(xs))
        assert np.allclose(out.first[0], np.cos(xs))
        assert np.allclose(out.second[0, 0], -np.sin(xs))


class TestJetGraphOps:
    def test_jet_linear_tanh_first_and_second(self):
        rng = np.random.default_rng(4)
        k = 2
        spec = ad.JetSpec(k)
        w1 = rng.normal(size=(5, k))
        b1 = rng.normal(size=5)
        w2 = rng.normal(size=(1, 5))
        b2 = rng.normal(size=1)
        x = rng.normal(size=(3, k))

        def net_plain(xi):
            h = np.tanh(w1 @ xi + b1)
            return (w2 @ h + b2)[0]

        seed = spec.seed(x)
        out = ad.jet_linear(
            ad.jet_tanh(
                ad.jet_linear(ad.const(seed), ad.const(w1), ad.const(b1)), spec
            ),
            ad.const(w2),
            ad.const(b2),
        )
        for b in range(3):
            val = out.value[b, 0, 0]
            grad = out.value[b, 1 : 1 + k, 0]
            assert np.isclose(val, net_plain(x[b]))
            ref = fd_grad(net_plain, x[b], h=1e-6)
            assert np.max(np.abs(grad - ref)) < 1e-6
            # second derivatives vs FD of the gradient
            packed = out.value[b, 1 + k :, 0]
            full = np.zeros((k, k))
            full[spec.iu, spec.ju] = packed
            full[spec.ju, spec.iu] = s = packed
            fd_h = np.zeros((k, k))
            h = 1e-5
            for i in range(k):
                xp = x[b].copy()
                xp[i] += h
                xm = x[b].copy()
                xm[i] -= h
                fd_h[i] = (fd_grad(net_plain, xp, 1e-5) - fd_grad(net_plain, xm, 1e-5)) / (2 * h)
            assert np.max(np.abs(full - 0.5 * (fd_h + fd_h.T))) < 1e-4

    def test_jet_param_gradients_match_fd(self):
        # d/dtheta of the state gradient: the nesting contract
        rng = np.random.default_rng(6)
        k = 2
        spec = ad.JetSpec(k)
        w1v = rng.normal(size=(4, k)) * 0.7
        b1v = rng.normal(size=4) * 0.1
        w2v = rng.normal(size=(1, 4)) * 0.5
        x = rng.normal(size=(2, k))

        def loss_for(w1_flat):
            w1 = ad.Param(w1_flat.reshape(4, k))
            seed = spec.seed(x)
            h = ad.jet_tanh(ad.jet_linear(ad.const(seed), w1, ad.const(b1v)), spec)
            out = ad.jet_linear(h, ad.const(w2v), ad.const(np.zeros(1)))
            gq = ad.getitem(out, (slice(None), 1, 0))  # dOut/dx_0 per batch point
            return ad.sum_node(ad.square_n(gq)), w1

        loss, w1 = loss_for(w1v.ravel())
        g = ad.grad_params(loss, [w1])

        def plain(w1_flat):
            w1 = w1_flat.reshape(4, k)
            tot = 0.0
            for b in range(2):
                h = 1e-6
                xp = x[b].copy()
                xp[0] += h
                xm = x[b].copy()
                xm[0] -= h
                f = lambda xi: (w2v @ np.tanh(w1 @ xi + b1v))[0]
                tot += ((f(xp) - f(xm)) / (2 * h)) ** 2
            return tot

        ref = fd_grad(plain, w1v.ravel(), h=1e-5)
        assert np.max(np.abs(g - ref) / np.maximum(np.abs(ref), 1e-2)) < 1e-4


class TestSpectraNodes:
    def test_sym_eigvals_gradient(self):
        rng = np.random.default_rng(9)
        a0 = rng.normal(size=(2, 3, 3))
        a0 = 0.5 * (a0 + a0.transpose(0, 2, 1))

        def loss_of(a_flat):
            p = ad.Param(a_flat.reshape(2, 3, 3))
            sym = ad.scale(p + ad.Node(np.transpose(p.value, (0, 2, 1))), 1.0)
            w = ad.sym_eigvals_node(p)
            return ad.sum_node(ad.square_n(w)), p

        loss, p = loss_of(a0.ravel())
        g = ad.grad_params(loss, [p])

        def plain(a_flat):
            a = a_flat.reshape(2, 3, 3)
            a = 0.5 * (a + a.transpose(0, 2, 1))
            w = np.linalg.eigvalsh(a)
            return (w**2).sum()

        ref = fd_grad(plain, a0.ravel(), h=1e-6)
        assert np.max(np.abs(g - ref)) < 1e-5

    def test_eig_re_im_gradient(self):
        rng = np.random.default_rng(10)
        a0 = rng.normal(size=(3, 2, 2))

        def build(a_flat):
            p = ad.Param(a_flat.reshape(3, 2, 2))
            re, im = ad.eig_re_im(p)
            loss = ad.sum_node(ad.square_n(re)) + ad.sum_node(ad.square_n(im))
            return loss, p

        loss, p = build(a0.ravel())
        g = ad.grad_params(loss, [p])

        def plain(a_flat):
            a = a_flat.reshape(3, 2, 2)
            tot = 0.0
            for b in range(3):
                w = np.linalg.eigvals(a[b])
                tot += (w.real**2).sum() + (w.imag**2).sum()
            return tot

        ref = fd_grad(plain, a0.ravel(), h=1e-6)
        assert np.max(np.abs(g - ref)) < 1e-5


class TestPlumbingOps:
    def test_gram_and_tril(self):
        rng = np.random.default_rng(14)
        v0 = rng.normal(size=(2, 3))

        def build(vflat):
            p = ad.Param(vflat.reshape(2, 3))
            l = ad.tril_unpack(p, 2)
            r = ad.gram(l)
            return ad.sum_node(ad.square_n(r)), p

        loss, p = build(v0.ravel())
        g = ad.grad_params(loss, [p])

        def plain(vflat):
            v = vflat.reshape(2, 3)
            tot = 0.0
            for b in range(2):
                l = np.zeros((2, 2))
                l[np.tril_indices(2)] = v[b]
                tot += ((l @ l.T) ** 2).sum()
            return tot

        ref = fd_grad(plain, v0.ravel())
        assert np.max(np.abs(g - ref)) < 1e-5

    def test_unpack_sym_roundtrip_gradient(self):
        v0 = np.arange(1.0, 7.0).reshape(2, 3)
        p = ad.Param(v0)
        full = ad.unpack_sym(p, 2)
        assert np.allclose(full.value[0], [[1.0, 2.0], [2.0, 3.0]])
        loss = ad.sum_node(full)
        g = ad.grad_params(loss, [p]).reshape(2, 3)
        # off-diagonal packed entries appear twice in the full matrix
        assert np.allclose(g, [[1.0, 2.0, 1.0], [1.0, 2.0, 1.0]])

    def test_embed_and_bmatvec(self):
        r2 = ad.Param(np.full((1, 1, 1), 2.0))
        full = ad.embed_pp(r2, 2)
        assert np.allclose(full.value[0], [[0.0, 0.0], [0.0, 2.0]])
        v = ad.const(np.array([[1.0, 3.0]]))
        out = ad.bmatvec(full, v)
        assert np.allclose(out.value, [[0.0, 6.0]])
        g = ad.grad_params(ad.sum_node(out), [r2])
        assert np.allclose(g, [3.0])
