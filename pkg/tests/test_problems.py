import numpy as np
import pytest

from agmlab.numerics import Rng, fd_grad, fd_jacobian
from agmlab.problems import (DiagNetProblem, EllipseProblem, MatrixFacProblem,
                             QuadraticProblem, SeparableCubicProblem,
                             problem_from_config)


def check_derivative_chain(problem, points, grad_tol=1e-5, hess_tol=1e-4,
                           third_tol=1e-3, rng=None):
    """Gradient vs loss, Hessian vs gradient, third_dir vs Hessian contraction."""
    rng = rng or Rng(99)
    for theta in points:
        g = problem.grad(theta)
        gfd = fd_grad(problem.loss, theta)
        scale = 1 + np.max(np.abs(gfd))
        assert np.max(np.abs(g - gfd)) <= grad_tol * scale
        h = problem.hessian(theta)
        hfd = fd_jacobian(problem.grad, theta)
        assert np.max(np.abs(h - hfd)) <= hess_tol * (1 + np.max(np.abs(hfd)))
        m = rng.normal(size=(problem.dim, problem.dim))
        m = (m + m.T) / 2
        td = problem.third_dir(theta, m)
        tdfd = fd_grad(lambda x: float(np.sum(problem.hessian(x) * m)), theta,
                       h=1e-5 * (1 + np.linalg.norm(theta)))
        assert np.max(np.abs(td - tdfd)) <= third_tol * (1 + np.max(np.abs(tdfd)))


def check_unbiased(problem, theta, n_draws=20000, seed=31):
    rng = Rng(seed)
    acc = np.zeros(problem.dim)
    acc2 = np.zeros(problem.dim)
    for _ in range(n_draws):
        g = problem.sample_grad(theta, rng)
        acc += g
        acc2 += g * g
    mean = acc / n_draws
    se = np.sqrt(np.clip(acc2 / n_draws - mean**2, 0, None) / n_draws)
    gap = np.abs(mean - problem.grad(theta))
    assert np.all(gap <= 4.0 * se + 1e-12)


class TestEllipse:
    def setup_method(self):
        self.prob = EllipseProblem(1.4, 1.0)

    def test_rejects_bad_axes(self):
        with pytest.raises(ValueError):
            EllipseProblem(0.0, 1.0)

    def test_loss_on_manifold_is_noise_floor(self):
        # 1/2 E[delta^2] with delta = +-0.5
        z = self.prob.point_at(0.7)
        assert np.isclose(self.prob.loss(z), 0.125)
        assert np.isclose(np.linalg.norm(self.prob.grad(z)), 0.0, atol=1e-12)

    def test_alpha_is_noise_second_moment(self):
        assert self.prob.alpha() == 0.25

    def test_label_noise_identity_on_manifold(self):
        for phi in np.linspace(0.1, 2 * np.pi, 5):
            z = self.prob.point_at(phi)
            h = self.prob.hessian(z)
            gap = np.linalg.norm(self.prob.noise_cov(z) - self.prob.alpha() * h)
            assert gap <= 1e-6 * np.linalg.norm(h)

    def test_derivative_chain(self):
        rng = Rng(1)
        pts = [rng.normal(size=2) for _ in range(20)]
        check_derivative_chain(self.prob, pts)

    def test_unbiased_sampler(self):
        check_unbiased(self.prob, np.array([0.9, 0.4]))

    def test_config_roundtrip(self):
        p2 = problem_from_config(self.prob.to_config())
        assert p2.a == self.prob.a and p2.b == self.prob.b


class TestDiagNet:
    def setup_method(self):
        self.prob = DiagNetProblem.generate(d=8, n=5, kappa=3, noise_std=0.7,
                                            rng=Rng(12), seed=12)

    def test_kappa_bound(self):
        with pytest.raises(ValueError):
            DiagNetProblem.generate(d=3, n=2, kappa=4, noise_std=1.0, rng=Rng(0))

    def test_ground_truth_sparsity(self):
        assert np.count_nonzero(self.prob.w_star) == 3

    def test_manifold_point_fits_exactly(self):
        mp = self.prob.manifold_point()
        assert self.prob.manifold_residual(mp) == 0.0

    def test_hessian_on_manifold_matches_outer_product_form(self):
        mp = self.prob.manifold_point()
        a, b = mp[:8], mp[8:]
        g = np.hstack([2 * self.prob.z * a, -2 * self.prob.z * b])
        assert np.allclose(self.prob.hessian(mp), g.T @ g / self.prob.n)

    def test_hessian_diag_expectation_structure(self):
        # On-manifold diagonal is exactly 4 a_j^2 (and 4 b_j^2): z^2 = 1
        mp = self.prob.manifold_point()
        diag = self.prob.hessian_diag(mp)
        a, b = mp[:8], mp[8:]
        assert np.allclose(diag, 4 * np.concatenate([a**2, b**2]))

    def test_label_noise_identity_on_manifold(self):
        rng = Rng(8)
        _, _, vt = np.linalg.svd(self.prob.z, full_matrices=True)
        null = vt[self.prob.n:]
        for _ in range(5):
            w = self.prob.w_star + 0.2 * null.T @ rng.normal(size=null.shape[0])
            s = 0.3 + 0.2 * rng.uniform(size=8)
            theta = np.concatenate([np.sqrt(np.clip(w, 0, None) + s),
                                    np.sqrt(np.clip(-w, 0, None) + s)])
            assert self.prob.manifold_residual(theta) <= 1e-9
            h = self.prob.hessian(theta)
            gap = np.linalg.norm(self.prob.noise_cov(theta) - self.prob.alpha() * h)
            assert gap <= 1e-6 * np.linalg.norm(h)

    def test_derivative_chain(self):
        rng = Rng(2)
        pts = [0.8 + 0.3 * rng.normal(size=16) for _ in range(10)]
        check_derivative_chain(self.prob, pts)

    def test_unbiased_sampler(self):
        theta = 0.9 + 0.1 * Rng(3).normal(size=16)
        check_unbiased(self.prob, theta)

    def test_test_loss_is_exact_expectation(self):
        theta = 0.7 + 0.2 * Rng(4).normal(size=16)
        w_gap = self.prob.w_hat(theta) - self.prob.w_star
        assert np.isclose(self.prob.test_loss(theta), np.sum(w_gap**2))

    def test_config_roundtrip_bitwise(self):
        p2 = problem_from_config(self.prob.to_config())
        assert np.array_equal(p2.z, self.prob.z)
        assert np.array_equal(p2.w_star, self.prob.w_star)

    def test_checksum_mismatch_detected(self):
        cfg = self.prob.to_config()
        cfg["checksum"] = "0" * 16
        with pytest.raises(ValueError, match="checksum"):
            problem_from_config(cfg)


class TestMatrixFac:
    def setup_method(self):
        self.prob = MatrixFacProblem.generate([4, 5, 4], rank=2, n_meas=15,
                                              batch=4, sigma=0.3, rng=Rng(6), seed=6)

    def test_dims_validation(self):
        with pytest.raises(ValueError, match="layer dim"):
            MatrixFacProblem.generate([4, 2, 4], rank=2, n_meas=5, batch=1,
                                      sigma=0.1, rng=Rng(0))

    def test_zero_loss_at_exact_factorization(self):
        # depth-2 exact factorization of M*: W1 = M*, W2 = I (dims allow it)
        prob = MatrixFacProblem.generate([4, 4, 4], rank=2, n_meas=10, batch=1,
                                         sigma=0.0, rng=Rng(1), seed=1)
        theta = prob.pack([prob.m_star, np.eye(4)])
        assert prob.train_mse(theta) <= 1e-24
        assert prob.manifold_residual(theta) <= 1e-12

    def test_chain_gradient_vs_fd(self):
        rng = Rng(7)
        theta = self.prob.init_point(rng, scale=0.6)
        a = self.prob.a_meas[3]
        g = self.prob._meas_grad(theta, a)
        gfd = fd_grad(lambda th: float(np.sum(a * self.prob.end_to_end(th))), theta)
        assert np.max(np.abs(g - gfd)) <= 1e-6

    def test_derivative_chain(self):
        rng = Rng(8)
        pts = [self.prob.init_point(rng, scale=0.6) for _ in range(3)]
        check_derivative_chain(self.prob, pts, third_tol=1e-3)

    def test_hvp_matches_hessian(self):
        theta = self.prob.init_point(Rng(9), scale=0.5)
        h = self.prob.hessian(theta)
        u = Rng(10).normal(size=self.prob.dim)
        assert np.allclose(self.prob.hvp(theta, u), h @ u, atol=1e-10)

    def test_hessian_diag_exact(self):
        theta = self.prob.init_point(Rng(11), scale=0.5)
        assert np.allclose(self.prob.hessian_diag(theta),
                           np.diag(self.prob.hessian(theta)), atol=1e-12)

    def test_unbiased_sampler(self):
        theta = self.prob.init_point(Rng(12), scale=0.5)
        check_unbiased(self.prob, theta, n_draws=20000)

    def test_label_noise_identity_monte_carlo(self):
        # On the manifold the noise covariance approaches alpha * H
        prob = MatrixFacProblem.generate([3, 4, 3], rank=1, n_meas=8, batch=2,
                                         sigma=0.4, rng=Rng(13), seed=13)
        w1 = prob.m_star
        theta = prob.pack([np.vstack([w1, np.zeros((1, 3))]),
                           np.hstack([np.eye(3), np.zeros((3, 1))])])
        assert prob.manifold_residual(theta) <= 1e-12
        sig = prob.noise_cov(theta, n_samples=100000)
        target = prob.alpha() * prob.hessian(theta)
        # Monte-Carlo tolerance: a few sigma of the covariance estimator
        assert np.linalg.norm(sig - target) <= 0.05 * max(np.linalg.norm(target), 1e-12)

    def test_config_roundtrip_bitwise(self):
        p2 = problem_from_config(self.prob.to_config())
        assert np.array_equal(p2.a_meas, self.prob.a_meas)
        assert np.array_equal(p2.m_star, self.prob.m_star)


class TestQuadratic:
    def test_hessian_constant_third_zero(self):
        prob = QuadraticProblem(np.diag([2.0, 1.0]), alpha=0.3)
        th = np.array([1.0, -1.0])
        assert np.allclose(prob.hessian(th), np.diag([2.0, 1.0]))
        assert np.allclose(prob.third_dir(th, np.eye(2)), 0.0)

    def test_geometric_convergence_noiseless(self):
        # SGD on a clean quadratic contracts at the exact linear rate
        from agmlab.agm import make_sgd, init_state, agm_step
        prob = QuadraticProblem(np.diag([1.0, 0.5]))
        spec = make_sgd(2, eta=0.1)
        st = init_state(spec, np.array([1.0, 1.0]))
        rng = Rng(0)
        for _ in range(50):
            st = agm_step(spec, st, prob, rng)
        expected = np.array([(1 - 0.1) ** 50, (1 - 0.05) ** 50])
        assert np.allclose(st.theta, expected, rtol=1e-10)


class TestSeparableCubic:
    def test_diagonal_hessian(self):
        prob = SeparableCubicProblem(np.array([[1.0, 2.0], [3.0, 4.0]]))
        theta = np.abs(Rng(1).normal(size=4)) + 0.5
        h = prob.hessian(theta)
        assert np.allclose(h, np.diag(np.diag(h)))
        check_derivative_chain(prob, [theta])
