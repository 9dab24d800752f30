import numpy as np
import pytest

from idapbc import ph_core as ph


@pytest.fixture
def pend():
    return ph.simple_pendulum()


@pytest.fixture
def dpend():
    return ph.double_pendulum()


class TestHamiltonian:
    def test_pendulum_rest(self, pend):
        assert ph.hamiltonian(pend, [0.0, 0.0]) == pytest.approx(0.0)

    def test_pendulum_upright(self, pend):
        assert ph.hamiltonian(pend, [np.pi, 0.0]) == pytest.approx(2 * 9.81)

    def test_double_pendulum_kinetic(self, dpend):
        # M(0,0) = [[2,1],[1,1]], M^-1 = [[1,-1],[-1,2]]; p=(1,0) -> H = 0.5
        assert ph.hamiltonian(dpend, [0.0, 0.0, 1.0, 0.0]) == pytest.approx(0.5)

    def test_gradient_fast_path_matches_jets(self, pend, dpend):
        rng = np.random.default_rng(0)
        for sys in (pend, dpend):
            for _ in range(50):
                x = rng.normal(size=2 * sys.n) * 2.0
                fast = ph.hamiltonian_gradient(sys, x)
                _, slow, _ = ph.hamiltonian_derivatives(sys, x)
                assert np.max(np.abs(fast - slow)) < 1e-12

    def test_pendulum_gradient_value(self, pend):
        g = ph.hamiltonian_gradient(pend, [np.pi / 2, 1.0])
        assert np.allclose(g, [9.81, 1.0])

    def test_pendulum_hessian_value(self, pend):
        _, _, h = ph.hamiltonian_derivatives(pend, [0.0, 0.0])
        assert np.allclose(h, np.diag([9.81, 1.0]))

    def test_batched_derivatives(self, dpend):
        rng = np.random.default_rng(1)
        xs = rng.normal(size=(16, 4))
        vals, grads, hess = ph.hamiltonian_derivatives(dpend, xs)
        for i in range(16):
            assert vals[i] == pytest.approx(ph.hamiltonian(dpend, xs[i]))
            _, g, h = ph.hamiltonian_derivatives(dpend, xs[i])
            assert np.allclose(grads[i], g)
            assert np.allclose(hess[i], h)


class TestStructure:
    def test_pendulum_blocks(self, pend):
        j, r, g = ph.structure_matrices(pend, [0.3, -0.2])
        assert np.array_equal(j, [[0.0, 1.0], [-1.0, 0.0]])
        assert np.array_equal(r, np.zeros((2, 2)))
        assert np.array_equal(g, [[0.0], [1.0]])

    def test_double_pendulum_input(self, dpend):
        _, _, g = ph.structure_matrices(dpend, np.zeros(4))
        assert np.array_equal(g[:2], np.zeros((2, 2)))
        assert np.array_equal(g[2:], np.eye(2))

    def test_damped_block(self):
        sys = ph.simple_pendulum()
        sys.dissipation = lambda x: np.eye(1)
        _, r, _ = ph.structure_matrices(sys, [0.0, 0.0])
        assert np.array_equal(r, [[0.0, 0.0], [0.0, 1.0]])

    def test_skewness_exact(self, dpend):
        j, r, _ = ph.structure_matrices(dpend, np.ones(4))
        assert np.array_equal(j + j.T, np.zeros((4, 4)))
        assert np.min(np.linalg.eigvalsh(r)) >= -1e-12

    def test_inertia_spd_over_box(self, dpend):
        rng = np.random.default_rng(4)
        from idapbc import numerics as nm

        for _ in range(200):
            q = rng.uniform(-np.pi, np.pi, size=2)
            nm.cholesky(dpend.mass(q))  # raises if not SPD


class TestDynamics:
    def test_equilibrium(self, pend):
        assert np.allclose(ph.open_loop_dynamics(pend, [0.0, 0.0], [0.0]), 0.0)

    def test_gravity_pull(self, pend):
        xdot = ph.open_loop_dynamics(pend, [np.pi / 2, 0.0], [0.0])
        assert np.allclose(xdot, [0.0, -9.81])

    def test_forced(self, pend):
        xdot = ph.open_loop_dynamics(pend, [0.0, 1.0], [2.0])
        assert np.allclose(xdot, [1.0, 2.0])

    def test_dimension_check(self, pend):
        with pytest.raises(ph.ContractError):
            ph.open_loop_dynamics(pend, [0.0, 0.0], [1.0, 2.0])

    def test_output_zero_momentum(self, pend):
        assert np.allclose(ph.output_map(pend, [1.3, 0.0]), 0.0)

    def test_output_velocity(self, pend):
        assert np.allclose(ph.output_map(pend, [0.0, 2.0]), [2.0])

    def test_output_double_pendulum(self, dpend):
        y = ph.output_map(dpend, [0.0, 0.0, 1.0, 0.0])
        assert np.allclose(y, [1.0, -1.0])


class TestPowerBalance:
    def test_identity_many_states(self, pend, dpend):
        rng = np.random.default_rng(7)
        for sys in (pend, dpend):
            for _ in range(1000):
                x = rng.normal(size=2 * sys.n) * 2.0
                u = rng.normal(size=sys.n)
                assert abs(ph.power_balance_defect(sys, x, u)) <= 1e-10

    def test_identity_with_damping(self):
        sys = ph.simple_pendulum()
        sys.dissipation = lambda x: np.array([[0.7]])
        rng = np.random.default_rng(8)
        for _ in range(100):
            x = rng.normal(size=2)
            u = rng.normal(size=1)
            assert abs(ph.power_balance_defect(sys, x, u)) <= 1e-10


class TestAnnihilator:
    def test_pendulum(self, pend):
        _, _, g = ph.structure_matrices(pend, [0.0, 0.0])
        gp = ph.left_annihilator(g)
        assert np.array_equal(gp, [[1.0, 0.0]])
        assert np.array_equal(gp @ g, np.zeros((1, 1)))

    def test_double_pendulum(self, dpend):
        _, _, g = ph.structure_matrices(dpend, np.zeros(4))
        gp = ph.left_annihilator(g)
        assert np.array_equal(gp, np.hstack([np.eye(2), np.zeros((2, 2))]))
        assert np.array_equal(gp @ g, np.zeros((2, 2)))

    def test_rejects_noncanonical(self):
        with pytest.raises(ph.ContractError):
            ph.left_annihilator(np.array([[1.0], [0.0]]))


class TestFactory:
    def test_make_system(self):
        sys = ph.make_system("simple_pendulum", {"m": 2.0})
        assert sys.params["m"] == 2.0
        with pytest.raises(ph.ContractError):
            ph.make_system("triple_pendulum")
