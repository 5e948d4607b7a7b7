import functools
import math

import numpy as np
import pytest

from conftest import in_variance_interval
from langstep.errorlab import rate_fit
from langstep.model import DiffusionModel, heavy_tail, linear_multiplicative, ou
from langstep.noise import NoiseSource, gaussian_block
from langstep.ou_oracle import OuOracle
from langstep.scheme import (
    BlowUpError,
    ChainState,
    EmpiricalMeasureRecorder,
    ExactOU,
    FineEuler,
    MomentTracker,
    TangentState,
    WeightedEmpiricalMeasure,
    accumulate_empirical,
    bel_gradient,
    euler_step,
    genuine_value,
    ou_exact_step,
    run_chain,
    simulate,
    tangent_step,
)
from langstep.steps import explicit, polynomial

SQRT2 = math.sqrt(2.0)


def brownian(d=1, scale=1.0):
    s = scale * np.eye(d)
    return DiffusionModel(
        d=d, q=d,
        drift=lambda x: np.zeros_like(np.asarray(x, float)),
        diffusion=lambda x: np.broadcast_to(s, np.shape(x)[:-1] + (d, d)),
        additive=True,
    )


def frozen(d=1):
    return DiffusionModel(
        d=d, q=d,
        drift=lambda x: np.zeros_like(np.asarray(x, float)),
        diffusion=lambda x: np.zeros(np.shape(x)[:-1] + (d, d)),
        additive=True,
    )


class TestEulerStep:
    def test_frozen_model(self):
        s = euler_step(ChainState(np.array([1.5, -2.0])), frozen(2), 0.3, np.array([0.4, 0.1]))
        np.testing.assert_array_equal(s.x, [1.5, -2.0])
        assert (s.n, s.elapsed) == (1, 0.3)

    def test_ou_examples(self):
        m = ou(1.0, SQRT2)
        assert euler_step(ChainState(np.array([1.0])), m, 0.1, [0.0]).x[0] == pytest.approx(0.9, rel=1e-15)
        assert euler_step(ChainState(np.array([1.0])), m, 0.1, [0.2]).x[0] == pytest.approx(1.1828427124746191, rel=1e-15)

    def test_blow_up(self):
        m = DiffusionModel(d=1, q=1, drift=lambda x: np.asarray(x) ** 3,
                           diffusion=lambda x: np.ones(np.shape(x) + (1,)))
        with pytest.raises(BlowUpError) as err:
            euler_step(ChainState(np.array([1e200]), n=4), m, 1.0, [0.0])
        assert err.value.n == 5

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            euler_step(ChainState(np.zeros(1)), ou(), 0.0, [0.0])


class TestGenuineValue:
    def setup_method(self):
        self.m = heavy_tail(1, 1.0)
        self.s = ChainState(np.array([0.7]), 3, 1.2)

    def test_endpoints(self):
        np.testing.assert_array_equal(genuine_value(self.s, self.m, 0.2, [0.3], 0.0), self.s.x)
        np.testing.assert_array_equal(genuine_value(self.s, self.m, 0.2, [0.3], 0.2),
                                      euler_step(self.s, self.m, 0.2, [0.3]).x)

    def test_range(self):
        with pytest.raises(ValueError):
            genuine_value(self.s, self.m, 0.2, [0.3], 0.25)
        with pytest.raises(ValueError):
            genuine_value(self.s, self.m, 0.2, [0.3], 0.1)

    def test_bridge_mean(self):
        z = np.random.default_rng(0).standard_normal((20_000, 1))
        gamma, dW = 0.2, np.array([0.3])
        vals = np.array([genuine_value(self.s, self.m, gamma, dW, gamma / 2, zi)[0] for zi in z])
        x = self.s.x[0]
        sig = math.sqrt(1 + x * x)
        expected = x + gamma / 2 * (-x) + sig * dW[0] / 2
        # bridge variance at the midpoint is gamma / 4
        se = sig * math.sqrt(gamma / 4) / math.sqrt(z.shape[0])
        assert abs(vals.mean() - expected) < 4 * se
        assert np.var(vals) == pytest.approx(sig**2 * gamma / 4, rel=0.05)


class TestEmpiricalMeasure:
    def test_single_step(self):
        m = accumulate_empirical(WeightedEmpiricalMeasure(1), [0.4], 0.5)
        assert m.integrate(lambda p: np.ones(len(p))) == 1.0
        assert m.normalized_weights().tolist() == [1.0]

    def test_hand_example(self):
        m = WeightedEmpiricalMeasure(1)
        accumulate_empirical(m, [0.0], 1.0)
        accumulate_empirical(m, [2.0], 0.5)
        assert m.total_weight == 1.5
        assert m.integrate(lambda p: p[:, 0]) == pytest.approx(2 / 3, rel=1e-15)

    def test_normalization_along_chain(self):
        s = polynomial(0.5, 0.9)
        rec = EmpiricalMeasureRecorder(1)
        simulate(ou(), s, 500, [0.0], seed=1, n_paths=3, observers=[rec])
        for stream, meas in rec.measures.items():
            assert len(meas) == 500
            assert meas.integrate(lambda p: np.ones(len(p))) == 1.0
            assert meas.total_weight == pytest.approx(s.gamma_sum(500), rel=1e-15)
            np.testing.assert_array_equal(meas.weights, s.gammas(1, 501))
        # the first atom is the start point
        assert rec.measures[0].points[0, 0] == 0.0

    def test_recorder_matches_manual_loop(self):
        s = explicit([0.5, 0.4, 0.3, 0.3, 0.1])
        m = heavy_tail(1, 1.0)
        rec = EmpiricalMeasureRecorder(1, streams=[2])
        simulate(m, s, 5, [0.2], seed=9, n_paths=4, observers=[rec])
        manual = WeightedEmpiricalMeasure(1)
        state = ChainState(np.array([0.2]))
        noise = NoiseSource(9, 2)
        for k in range(1, 6):
            g = s.gamma(k)
            accumulate_empirical(manual, state.x, g)
            state = euler_step(state, m, g, noise.next(1)[0] * math.sqrt(g))
        assert list(rec.measures) == [2]
        np.testing.assert_array_equal(rec.measures[2].points, manual.points)

    def test_rejects_bad_weight(self):
        with pytest.raises(ValueError):
            WeightedEmpiricalMeasure(1).add([0.0], 0.0)
        with pytest.raises(ValueError):
            WeightedEmpiricalMeasure(1).integrate(lambda p: p)


class TestTangent:
    def test_identity_kept(self):
        Y = tangent_step(TangentState.identity(2), frozen(2), np.zeros(2), 0.1, np.ones(2))
        np.testing.assert_array_equal(Y.Y, np.eye(2))
        assert Y.det == 1.0

    def test_ou_scalar_recursion(self):
        m = ou(0.7, 1.0, d=2)
        Y = TangentState.identity(2)
        for _ in range(25):
            Y = tangent_step(Y, m, np.ones(2), 0.05, np.zeros(2))
        np.testing.assert_allclose(Y.Y, (1 - 0.7 * 0.05) ** 25 * np.eye(2), rtol=1e-13)

    def test_linear_model_converges_to_exponential(self):
        mu, theta, t = -0.5, 0.8, 1.0
        m = linear_multiplicative(mu, theta)
        P = 2000
        fine = 2**10
        Z = gaussian_block(4, np.arange(P), 0, fine)[:, :, 0] * math.sqrt(t / fine)
        exact = np.exp((mu - theta**2 / 2) * t + theta * Z.sum(axis=0))
        errs, hs = [], []
        for k in range(3, 8):
            m_steps = 2**k
            dW = Z.reshape(m_steps, fine // m_steps, P).sum(axis=1)
            Y = np.ones((P, 1, 1))
            x = np.ones((P, 1))
            for j in range(m_steps):
                Y = tangent_step(Y, m, x, t / m_steps, dW[j][:, None]).Y
            errs.append(np.mean(np.abs(Y[:, 0, 0] - exact)))
            hs.append(t / m_steps)
        fit = rate_fit(hs, errs)
        assert 0.35 < fit.slope < 0.65
        assert all(b < a for a, b in zip(errs, errs[1:]))

    def test_finite_difference_consistency(self):
        m = heavy_tail(2, 1.0)
        s = explicit([0.05] * 40)
        x = np.array([0.4, -0.3])
        base = simulate(m, s, 40, x, seed=3, n_paths=50).final
        Z = gaussian_block(3, np.arange(50), 0, 40, 2) * math.sqrt(0.05)
        X = np.broadcast_to(x, (50, 2)).copy()
        Y = np.broadcast_to(np.eye(2), (50, 2, 2)).copy()
        for k in range(40):
            Y = tangent_step(Y, m, X, 0.05, Z[k]).Y
            X = X + 0.05 * m.b(X) + np.einsum("...ij,...j->...i", m.sigma(X), Z[k])
        errors = []
        for h in (1e-3, 1e-4):
            cols = []
            for i in range(2):
                xe = x.copy()
                xe[i] += h
                cols.append((simulate(m, s, 40, xe, seed=3, n_paths=50).final - base) / h)
            fd = np.stack(cols, axis=-1)
            errors.append(np.max(np.abs(fd - Y)))
        assert errors[1] < errors[0]
        assert errors[1] < 1e-3


class TestRunChain:
    def test_zero_steps(self):
        s = run_chain(ou(), polynomial(0.5, 0.9), 0, [0.3], NoiseSource(0, 0))
        assert s.x.tolist() == [0.3] and s.n == 0 and s.elapsed == 0.0

    def test_deterministic_and_matches_simulate(self):
        m, s = heavy_tail(1, 1.0), polynomial(0.5, 0.9)
        a = run_chain(m, s, 300, [0.1], NoiseSource(5, 7))
        b = run_chain(m, s, 300, [0.1], NoiseSource(5, 7))
        assert a.x.tobytes() == b.x.tobytes()
        assert a.elapsed == s.gamma_sum(300)
        c = simulate(m, s, 300, [0.1], seed=5, streams=[3, 7]).final[1]
        assert c.tobytes() == a.x.tobytes()

    def test_manual_loop(self):
        m, s = heavy_tail(1, 1.0), polynomial(0.3, 0.6)
        noise = NoiseSource(2, 0)
        state = ChainState(np.array([0.5]))
        for k in range(1, 51):
            g = s.gamma(k)
            state = euler_step(state, m, g, noise.next(1)[0] * math.sqrt(g))
        out = run_chain(m, s, 50, [0.5], NoiseSource(2, 0))
        np.testing.assert_array_equal(out.x, state.x)

    def test_used_noise_rejected(self):
        n = NoiseSource(0, 0)
        n.next(2)
        with pytest.raises(ValueError):
            run_chain(ou(), polynomial(0.5, 0.9), 5, [0.0], n)


class TestSimulate:
    def test_thread_and_chunk_independence(self):
        m, s = heavy_tail(1, 1.0), polynomial(0.5, 0.9)
        a = simulate(m, s, 200, [0.0], seed=1, n_paths=37, checkpoints=[50, 200])
        b = simulate(m, s, 200, [0.0], seed=1, n_paths=37, checkpoints=[50, 200],
                     chunk_paths=8, block_steps=13, threads=3)
        assert a.final.tobytes() == b.final.tobytes()
        assert a.snapshots[50].tobytes() == b.snapshots[50].tobytes()

    def test_coarse_increment_is_fine_sum(self):
        # with b = 0, sigma = I and x0 = 0 one step returns the aggregated increment
        m = brownian(2)
        s = explicit([0.3])
        res = simulate(m, s, 1, [0.0, 0.0], seed=8, n_paths=5, checkpoints=[1], companion=FineEuler(m, 6))
        Z = gaussian_block(8, np.arange(5), 0, 6, 2) * math.sqrt(0.3 / 6)
        summed = functools.reduce(lambda u, v: u + v, list(Z))
        assert res.final.tobytes() == summed.tobytes()
        assert res.companion[1].tobytes() == summed.tobytes()

    def test_fine_euler_refine_one_is_the_chain(self):
        m, s = heavy_tail(1, 1.0), polynomial(0.5, 0.9)
        r = simulate(m, s, 100, [0.3], seed=2, n_paths=10, checkpoints=[100], companion=FineEuler(m, 1))
        assert r.snapshots[100].tobytes() == r.companion[100].tobytes()

    def test_brownian_marginal(self):
        S = np.array([[1.0, 0.0], [0.5, 1.0]])
        m = DiffusionModel(d=2, q=2, drift=lambda x: np.zeros_like(np.asarray(x, float)),
                           diffusion=lambda x: np.broadcast_to(S, np.shape(x)[:-1] + (2, 2)), additive=True)
        s = polynomial(0.5, 0.5)
        P = 10_000
        x = simulate(m, s, 40, [1.0, -1.0], seed=0, n_paths=P).final - np.array([1.0, -1.0])
        cov = s.gamma_sum(40) * S @ S.T
        C = np.cov(x.T)
        se = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / (P - 1))
        assert np.all(np.abs(C - cov) < 3 * se)
        assert np.all(np.abs(x.mean(axis=0)) < 3 * np.sqrt(np.diag(cov) / P))

    def test_ou_variance_matches_oracle(self):
        s = polynomial(0.5, 0.9)
        cps = [10, 100, 1000]
        r = simulate(ou(1.0, SQRT2), s, 1000, [0.0], seed=4, n_paths=10_000, checkpoints=cps)
        o = OuOracle(1.0, SQRT2, s)
        for n in cps:
            ok, v, ci = in_variance_interval(r.snapshots[n][:, 0], o.variance_recursion(n))
            assert ok, (n, v, ci)

    def test_invariant_start_and_exact_companion(self):
        s = polynomial(0.5, 0.9)
        r = simulate(ou(1.0, SQRT2), s, 300, "invariant", seed=6, n_paths=10_000, checkpoints=[0, 300],
                     companion=ExactOU(1.0, SQRT2))
        np.testing.assert_array_equal(r.snapshots[0], r.companion[0])
        for snap in (r.snapshots[0], r.companion[300]):
            ok, v, ci = in_variance_interval(snap[:, 0], 1.0)
            assert ok, (v, ci)
        o = OuOracle(1.0, SQRT2, s, initial_variance=1.0)
        ok, v, ci = in_variance_interval(r.snapshots[300][:, 0], o.variance_recursion(300))
        assert ok
        # the coupled paths stay close
        assert np.mean(np.abs(r.snapshots[300] - r.companion[300])) < 0.05

    def test_invariant_start_needs_law(self):
        with pytest.raises(ValueError):
            simulate(heavy_tail(2, 1.0), polynomial(0.5, 0.9), 5, "invariant", n_paths=2)

    def test_blow_up_policies(self):
        m = DiffusionModel(d=1, q=1, drift=lambda x: np.asarray(x) ** 3,
                           diffusion=lambda x: np.ones(np.shape(x) + (1,)))
        s = explicit([1.0] * 30)
        x0 = np.array([[0.0], [0.0], [50.0]])
        with pytest.raises(BlowUpError) as err:
            simulate(m, s, 30, x0, n_paths=3)
        assert err.value.path == 2
        r = simulate(m, s, 30, x0, n_paths=3, on_blowup="drop")
        assert r.dropped.tolist()[2] is True
        assert np.isnan(r.final[2, 0])

    def test_checkpoint_validation(self):
        with pytest.raises(ValueError):
            simulate(ou(), polynomial(0.5, 0.9), 10, [0.0], checkpoints=[11])
        with pytest.raises(ValueError):
            simulate(ou(), polynomial(0.5, 0.9), 10, [0.0], on_blowup="ignore")


class TestMomentTracker:
    def test_frozen_model_constant(self):
        V = lambda x: 1 + np.sum(x * x, axis=-1)
        mt = MomentTracker(V, [1, 2], [0, 5, 10])
        simulate(frozen(1), polynomial(0.5, 0.9), 10, [2.0], n_paths=4, observers=[mt])
        np.testing.assert_array_equal(mt.series()[:, 1:], np.tile([5.0, 25.0], (3, 1)))

    def test_ou_plateau(self):
        V = lambda x: 1 + np.sum(x * x, axis=-1)
        mt = MomentTracker(V, [1, 2], [3000])
        simulate(ou(1.0, SQRT2), polynomial(0.5, 0.9), 3000, [0.0], seed=2, n_paths=10_000, observers=[mt])
        m1, m2 = mt.means[3000]
        assert m1 == pytest.approx(2.0, abs=4 * math.sqrt(2 / 10_000))
        assert m2 == pytest.approx(6.0, abs=4 * math.sqrt(96 / 10_000))


class TestOuExactStep:
    # sqrt of Var(I) - gamma * (Cov(I, dW) / gamma)^2 for alpha = 1, gamma = u (50-digit mpmath)
    RESID = {1e-4: 2.8866070129514127e-07, 0.01: 0.00028723631880663936, 0.05: 0.003148061528800508,
             0.099: 0.008560644589706236, 0.1: 0.008686391677903273, 0.2: 0.023393964687552057,
             1.0: 0.18098606987269933}

    @pytest.mark.parametrize("u", sorted(RESID))
    def test_residual_scale(self, u):
        assert ou_exact_step(0.0, 1.0, 1.0, u, 0.0, 1.0) == pytest.approx(self.RESID[u], rel=1e-12)

    def test_joint_moments(self):
        rng = np.random.default_rng(1)
        alpha, sigma, g, x = 2.0, 0.7, 0.3, 1.5
        dW = rng.standard_normal(400_000) * math.sqrt(g)
        z = rng.standard_normal(400_000)
        y = ou_exact_step(x, alpha, sigma, g, dW, z)
        var = sigma**2 * (1 - math.exp(-2 * alpha * g)) / (2 * alpha)
        assert y.mean() == pytest.approx(x * math.exp(-alpha * g), abs=4 * math.sqrt(var / y.size))
        assert y.var() == pytest.approx(var, rel=0.01)
        cov = np.mean((y - y.mean()) * dW)
        assert cov == pytest.approx(sigma * (1 - math.exp(-alpha * g)) / alpha, rel=0.02)


class TestBel:
    def test_constant_function(self):
        r = bel_gradient(heavy_tail(1, 1.0), lambda y: 3.0 * np.ones(len(y)), [0.2], 0.5, n_paths=4000, n_substeps=50)
        assert abs(r.gradient[0]) < 3 * r.std_error[0]

    def test_ou_linear(self):
        r = bel_gradient(ou(1.0, 1.0), lambda y: y[:, 0], [0.0], 1.0, n_paths=8000, n_substeps=100, seed=2)
        assert abs(r.gradient[0] - math.exp(-1)) < 3 * r.std_error[0]
        assert r.rejected == 0

    def test_two_dimensional(self):
        m = ou(0.5, 1.0, d=2)
        r = bel_gradient(m, lambda y: y[:, 0] + 2 * y[:, 1], [0.0, 1.0], 1.0, n_paths=8000, n_substeps=50, seed=1)
        expected = np.array([1.0, 2.0]) * math.exp(-0.5)
        assert np.all(np.abs(r.gradient - expected) < 3.5 * r.std_error)

    def test_singular_paths_abort(self):
        m = linear_multiplicative(-1.0, 0.5)
        with pytest.raises(RuntimeError):
            bel_gradient(m, lambda y: y[:, 0], [0.0], 1.0, n_paths=100, n_substeps=10)

    def test_bad_time(self):
        with pytest.raises(ValueError):
            bel_gradient(ou(), lambda y: y[:, 0], [0.0], 0.0)
