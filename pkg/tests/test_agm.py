import warnings

import numpy as np
import pytest

from agmlab.agm import (AgmError, BlockConstantPreconditioner,
                        DiagonalPreconditioner, KroneckerPreconditioner,
                        agm_step, init_state, make_adam, make_adam_mini,
                        make_adame, make_adalayer, make_rmsprop, make_sgd,
                        make_shampoo, make_spec, run, shampoo_mats,
                        shampoo_vectorize, spec_from_config)
from agmlab.numerics import Rng, inv_sqrt_psd, kron, unvec, vec
from agmlab.problems import EllipseProblem, QuadraticProblem


class FixedGradProblem(QuadraticProblem):
    """Returns a constant stochastic gradient; handy for hand-checked steps."""

    def __init__(self, g):
        super().__init__(np.zeros((len(g), len(g))))
        self.g = np.asarray(g, dtype=float)

    def sample_grad(self, theta, rng, batch=None):
        return self.g.copy()


class RandomGradProblem(QuadraticProblem):
    def sample_grad(self, theta, rng, batch=None):
        return rng.normal(size=theta.size)


class TestSpecValidation:
    def test_beta1_range(self):
        with pytest.raises(AgmError, match="beta1"):
            make_adam(2, eta=0.1, beta1=0.95)

    def test_two_scheme_coupling(self):
        spec = make_adam(4, eta=0.1, c=0.05)
        assert spec.beta2 == 1 - 0.05 * 0.01
        faster = spec.with_eta(0.2)
        assert faster.beta2 == 1 - 0.05 * 0.04

    def test_beta2_passthrough(self):
        spec = make_adam(2, eta=0.01, beta2=0.999)
        assert np.isclose(spec.beta2, 0.999)
        assert np.isclose(spec.c, 0.001 / 0.0001)

    def test_default_c_gives_beta2_999(self):
        spec = make_adam(2, eta=0.05)
        assert np.isclose(spec.beta2, 0.999)

    def test_adame_lambda_range(self):
        with pytest.raises(AgmError, match="exponent"):
            make_adame(2, eta=0.1, lam=1.0)

    def test_empty_block_rejected(self):
        with pytest.raises(AgmError, match="empty"):
            make_adam_mini(3, eta=0.1, blocks=[[0, 1, 2], []])

    def test_partition_must_cover(self):
        with pytest.raises(AgmError, match="cover"):
            make_adam_mini(3, eta=0.1, blocks=[[0, 1]])

    def test_config_roundtrip(self):
        for spec in (make_sgd(3, eta=0.01), make_adam(3, eta=0.01),
                     make_rmsprop(3, eta=0.02), make_adame(3, eta=0.01, lam=0.3),
                     make_adam_mini(4, eta=0.01, blocks=[[0, 1], [2, 3]]),
                     make_shampoo((2, 3), eta=0.01)):
            spec2 = spec_from_config(spec.to_config())
            assert spec2.name == spec.name
            assert spec2.beta2 == spec.beta2


class TestSteps:
    def test_sgd_step_exact(self):
        prob = FixedGradProblem([1.0, 0.0])
        spec = make_sgd(2, eta=0.05)
        st = agm_step(spec, init_state(spec, np.array([1.0, 2.0])), prob, Rng(0))
        assert np.allclose(st.theta, [0.95, 2.0])

    def test_adam_first_step_hand_computed(self):
        prob = FixedGradProblem([1.0, 0.0])
        spec = make_adam(2, eta=0.1, beta1=0.9, beta2=0.999, eps=0.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            st = agm_step(spec, init_state(spec, np.zeros(2)), prob, Rng(0))
        assert np.allclose(st.m, [0.1, 0.0])
        assert np.allclose(st.v, [0.001, 0.0])
        assert np.isclose(st.theta[0], -0.1 * 0.1 / np.sqrt(0.001))

    def test_nan_gradient_aborts_with_diagnostic(self):
        prob = FixedGradProblem([np.nan, 0.0])
        spec = make_sgd(2, eta=0.1)
        with pytest.raises(AgmError, match="non-finite gradient"):
            agm_step(spec, init_state(spec, np.zeros(2)), prob, Rng(0))

    def test_v_nonnegative_along_trajectory(self):
        prob = RandomGradProblem(np.zeros((3, 3)))
        for spec in (make_adam(3, eta=0.05), make_adam_mini(3, eta=0.05, blocks=[[0, 2], [1]])):
            st = init_state(spec, np.zeros(3))
            rng = Rng(5)
            for _ in range(200):
                st = agm_step(spec, st, prob, rng)
                assert np.all(st.v >= 0)


class TestBuilders:
    def test_rmsprop_is_adam_beta1_zero(self):
        prob = RandomGradProblem(np.zeros((2, 2)))
        a = run(make_adam(2, eta=0.02, beta1=0.0), prob, 100, 100, Rng(3),
                theta0=np.ones(2))
        r = run(make_rmsprop(2, eta=0.02), prob, 100, 100, Rng(3),
                theta0=np.ones(2))
        assert np.array_equal(a.final_state.theta, r.final_state.theta)

    def test_adame_half_coincides_with_adam(self):
        prob = RandomGradProblem(np.zeros((3, 3)))
        a = run(make_adam(3, eta=0.01), prob, 150, 150, Rng(4), theta0=np.ones(3))
        e = run(make_adame(3, eta=0.01, lam=0.5), prob, 150, 150, Rng(4),
                theta0=np.ones(3))
        assert np.array_equal(a.final_state.theta, e.final_state.theta)

    def test_adam_mini_singletons_equal_adam(self):
        prob = RandomGradProblem(np.zeros((3, 3)))
        a = run(make_adam(3, eta=0.01), prob, 120, 120, Rng(6), theta0=np.ones(3))
        m = run(make_adam_mini(3, eta=0.01, blocks=[[0], [1], [2]]), prob,
                120, 120, Rng(6), theta0=np.ones(3))
        assert np.allclose(a.final_state.theta, m.final_state.theta, atol=1e-14)

    def test_adam_mini_single_block_is_scalar_preconditioner(self):
        spec = make_adam_mini(4, eta=0.01, blocks=[[0, 1, 2, 3]])
        s = spec.smap(np.array([1.0, 1.0, 1.0, 1.0]))
        assert isinstance(s, BlockConstantPreconditioner)
        assert s.is_scalar_multiple_of_identity
        mat = s.materialize()
        assert np.allclose(mat, mat[0, 0] * np.eye(4))

    def test_adalayer_matches_adam_mini(self):
        layers = [[0, 1], [2, 3, 4]]
        a = make_adalayer(5, eta=0.02, layers=layers)
        m = make_adam_mini(5, eta=0.02, blocks=layers)
        g = Rng(7).normal(size=5)
        assert np.array_equal(a.vmap(g), m.vmap(g))

    def test_make_spec_dispatch(self):
        assert make_spec("sgd", d=2, eta=0.1).name == "sgd"
        with pytest.raises(AgmError, match="unknown optimizer"):
            make_spec("adamw", d=2, eta=0.1)


class TestVmapLinearity:
    def test_vmap_matches_vmat_on_outer_products(self):
        rng = Rng(8)
        for spec in (make_adam(4, eta=0.01),
                     make_adam_mini(4, eta=0.01, blocks=[[0, 3], [1, 2]]),
                     make_sgd(4, eta=0.01),
                     make_shampoo((2, 2), eta=0.01)):
            for _ in range(5):
                g = rng.normal(size=spec.d)
                assert np.allclose(spec.vmap(g), spec.vmat(np.outer(g, g)),
                                   atol=1e-12)

    def test_vmat_linear_and_nonnegative_on_outers(self):
        spec = make_shampoo((3, 2), eta=0.01)
        rng = Rng(9)
        m1 = rng.normal(size=(6, 6))
        m2 = rng.normal(size=(6, 6))
        lhs = spec.vmat(2.0 * m1 + 3.0 * m2)
        assert np.allclose(lhs, 2.0 * spec.vmat(m1) + 3.0 * spec.vmat(m2))


class TestShampoo:
    def test_vectorize_hand_cases(self):
        vl, vr = shampoo_vectorize(np.array([[1.0, 0.0], [0.0, 0.0]]))
        ml, mr = shampoo_mats(np.concatenate([vl, vr]), (2, 2))
        assert np.allclose(ml, np.diag([1.0, 0.0]))
        assert np.allclose(mr, np.diag([1.0, 0.0]))
        vl, vr = shampoo_vectorize(np.eye(2))
        assert np.allclose(unvec(vl, (2, 2)), np.eye(2))
        assert np.allclose(unvec(vr, (2, 2)), np.eye(2))

    def test_vectorize_reconstructs_gram_matrices(self):
        g = Rng(10).normal(size=(3, 2))
        vl, vr = shampoo_vectorize(g)
        assert np.max(np.abs(unvec(vl, (3, 3)) - g @ g.T)) <= 1e-12
        assert np.max(np.abs(unvec(vr, (2, 2)) - g.T @ g)) <= 1e-12

    def test_agm_form_equals_matrix_form(self):
        d1, d2 = 3, 2
        eps = 1e-6
        spec = make_shampoo((d1, d2), eta=0.05, c=100.0, eps=eps, beta1=0.0)
        prob = RandomGradProblem(np.zeros((d1 * d2, d1 * d2)))
        st = init_state(spec, Rng(7).normal(size=d1 * d2))
        theta_m = unvec(st.theta, (d1, d2)).copy()
        s1, s2 = np.zeros((d1, d1)), np.zeros((d2, d2))
        r1, r2 = Rng(123), Rng(123)
        for _ in range(100):
            st = agm_step(spec, st, prob, r1)
            g = unvec(r2.normal(size=d1 * d2), (d1, d2))
            s1 = spec.beta2 * s1 + (1 - spec.beta2) * (g @ g.T)
            s2 = spec.beta2 * s2 + (1 - spec.beta2) * (g.T @ g)
            theta_m = theta_m - spec.eta * inv_sqrt_psd(s1 + eps * np.eye(d1)) \
                @ g @ inv_sqrt_psd(s2 + eps * np.eye(d2))
            assert np.max(np.abs(st.theta - vec(theta_m))) <= 1e-10

    def test_materialized_preconditioner_matches_table_form(self):
        spec = make_shampoo((3, 2), eta=0.01, eps=1e-4)
        g = Rng(11).normal(size=6)
        v = spec.vmap(g)
        ml, mr = shampoo_mats(v, (3, 2))
        want = inv_sqrt_psd(kron((mr + 1e-4 * np.eye(2)).T, ml + 1e-4 * np.eye(3)))
        got = spec.smap(v).materialize()
        assert np.max(np.abs(got - want)) <= 1e-10 * np.max(np.abs(want))

    def test_kronecker_apply_matches_materialize(self):
        left = np.array([[2.0, 0.3], [0.3, 1.0]])
        right = np.array([[1.5, -0.2, 0.0], [-0.2, 1.0, 0.1], [0.0, 0.1, 0.8]])
        p = KroneckerPreconditioner(left=left, right=right)
        x = Rng(12).normal(size=6)
        assert np.allclose(p.apply(x), p.materialize() @ x)
        assert np.allclose(p.inv().materialize() @ p.materialize(), np.eye(6),
                           atol=1e-12)


class TestRun:
    def test_record_schedule_final_always_recorded(self):
        prob = RandomGradProblem(np.zeros((2, 2)))
        spec = make_sgd(2, eta=0.01)
        traj = run(spec, prob, steps=7, record_every=100, rng=Rng(1),
                   theta0=np.zeros(2))
        assert list(traj.steps) == [7]
        traj = run(spec, prob, steps=10, record_every=3, rng=Rng(1),
                   theta0=np.zeros(2))
        assert list(traj.steps) == [3, 6, 9, 10]
        traj = run(spec, prob, steps=9, record_every=3, rng=Rng(1),
                   theta0=np.zeros(2))
        assert list(traj.steps) == [3, 6, 9]

    def test_deterministic_given_seed(self):
        prob = RandomGradProblem(np.zeros((2, 2)))
        spec = make_adam(2, eta=0.02)
        t1 = run(spec, prob, 50, 10, Rng(42), theta0=np.ones(2))
        t2 = run(spec, prob, 50, 10, Rng(42), theta0=np.ones(2))
        assert np.array_equal(t1.final_state.theta, t2.final_state.theta)
        assert np.array_equal(t1.columns["loss"], t2.columns["loss"])

    def test_sgd_geometric_convergence_on_clean_quadratic(self):
        prob = QuadraticProblem(np.diag([1.0, 0.25]))
        spec = make_sgd(2, eta=0.5)
        traj = run(spec, prob, 100, 10, Rng(0), theta0=np.array([1.0, 1.0]))
        lam_min = 0.25
        bound = (1 - 0.5 * lam_min) ** (2 * traj.steps.astype(float))
        assert np.all(traj.columns["loss"] <= bound + 1e-15)

    def test_state_checkpoint_roundtrip(self):
        from agmlab.agm import AgmState
        st = AgmState(np.array([1.0, 2.0]), np.array([0.1, 0.2]),
                      np.array([0.3, 0.4]), k=7)
        st2 = AgmState.from_config(st.to_config())
        assert np.array_equal(st2.theta, st.theta) and st2.k == 7


def test_beta1_irrelevance_on_manifold():
    """Momentum does not shift the on-manifold attractor: Adam vs RMSProp
    time-averaged projected angles agree within combined Monte-Carlo error."""
    ell = EllipseProblem(1.4, 1.0)
    n_seeds, burn, total = 32, 2500, 5000
    means = {}
    ses = {}
    for name, beta1 in (("adam", 0.9), ("rmsprop", 0.0)):
        finals = []
        for i, rng in enumerate(Rng(606).split(n_seeds)):
            spec = make_adam(2, eta=0.05, beta1=beta1, eps=1e-8)
            st = init_state(spec, 1.2 * ell.point_at(1.0))
            acc = []
            for k in range(total):
                st = agm_step(spec, st, ell, rng)
                if k >= burn and k % 50 == 0:
                    acc.append(ell.angle(st.theta))
            finals.append(np.mean(acc))
        means[name] = float(np.mean(finals))
        ses[name] = float(np.std(finals) / np.sqrt(n_seeds))
    gap = abs(means["adam"] - means["rmsprop"])
    combined = np.hypot(ses["adam"], ses["rmsprop"])
    assert gap <= 4.0 * combined + 0.02
