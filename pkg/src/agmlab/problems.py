"""Training-loss landscapes with analytic derivatives and label-noise samplers.

Each problem exposes the expected loss, its first three derivatives (the third
as the contraction ``third_dir(theta, M) = sum_jk M_jk * d^3 L / dth_i dth_j dth_k``),
a stochastic-gradient sampler with fresh label noise, the gradient-noise
covariance, the label-noise scale ``alpha`` (Sigma = alpha * Hessian on the
zero-residual manifold), and a manifold residual.

Naming note: the diagonal net's two parameter blocks are called (a, b); the
optimizer's second-moment vector keeps the name v.
"""
from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import Array, Rng, psd_sqrt, symmetrize

_REGISTRY: dict[str, type] = {}


def _register(cls):
    _REGISTRY[cls.kind] = cls
    return cls


def _checksum(*arrays: Array) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()[:16]


class Problem(abc.ABC):
    """Interface shared by all loss landscapes."""

    kind: str = "abstract"
    dim: int
    #: parameter shape when the parameter is a single matrix (Shampoo), else None
    matrix_shape: tuple[int, int] | None = None

    @abc.abstractmethod
    def loss(self, theta: Array) -> float:
        """Expected training loss (label-noise floor included)."""

    @abc.abstractmethod
    def grad(self, theta: Array) -> Array:
        ...

    @abc.abstractmethod
    def hessian(self, theta: Array) -> Array:
        ...

    @abc.abstractmethod
    def third_dir(self, theta: Array, m: Array) -> Array:
        """Directional third derivative sum_jk M_jk * grad(H_jk), M symmetric."""

    @abc.abstractmethod
    def sample_grad(self, theta: Array, rng: Rng, batch: int | None = None) -> Array:
        """Stochastic gradient with fresh label noise; mean equals grad(theta)."""

    @abc.abstractmethod
    def noise_cov(self, theta: Array) -> Array:
        """Covariance of sample_grad at theta (default batch size)."""

    @abc.abstractmethod
    def alpha(self) -> float:
        """Label-noise scale: noise_cov = alpha * hessian on the manifold."""

    @abc.abstractmethod
    def manifold_residual(self, theta: Array) -> float:
        """Max training-data fitting residual; 0 exactly on the manifold."""

    def hessian_diag(self, theta: Array) -> Array:
        return np.diag(self.hessian(theta)).copy()

    def hessian_trace(self, theta: Array) -> float:
        return float(np.trace(self.hessian(theta)))

    @abc.abstractmethod
    def to_config(self) -> dict:
        """JSON-serializable description sufficient to rebuild bit-for-bit."""


def problem_from_config(cfg: dict) -> Problem:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind not in _REGISTRY:
        raise ValueError(f"unknown problem kind {kind!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[kind].from_config(cfg)


@_register
class EllipseProblem(Problem):
    """Two-parameter elliptical loss with two-point label noise.

    L(x, y) = 1/2 * E_delta[(f(x, y) - 1 - delta)^2] with
    f = (x+y)^2 / (2 a^2) + (y-x)^2 / (2 b^2) and delta uniform on
    {-noise_magnitude, +noise_magnitude}.  The minimizer manifold is the
    ellipse f = 1, where the loss equals the noise floor 1/2 * E[delta^2].
    """

    kind = "ellipse"
    dim = 2

    def __init__(self, a: float, b: float, noise_magnitude: float = 0.5):
        if a <= 0 or b <= 0:
            raise ValueError(f"semi-axes must be positive, got a={a}, b={b}")
        self.a = float(a)
        self.b = float(b)
        self.noise_magnitude = float(noise_magnitude)
        # Hessian of f is constant.
        ia, ib = 1.0 / a**2, 1.0 / b**2
        self._f_hess = np.array([[ia + ib, ia - ib], [ia - ib, ia + ib]])

    def f(self, theta: Array) -> float:
        x, y = theta
        return float((x + y) ** 2 / (2 * self.a**2) + (y - x) ** 2 / (2 * self.b**2))

    def f_grad(self, theta: Array) -> Array:
        x, y = theta
        u, w = x + y, y - x
        return np.array([u / self.a**2 - w / self.b**2, u / self.a**2 + w / self.b**2])

    def loss(self, theta):
        return 0.5 * ((self.f(theta) - 1.0) ** 2 + self.noise_magnitude**2)

    def grad(self, theta):
        return (self.f(theta) - 1.0) * self.f_grad(theta)

    def hessian(self, theta):
        g = self.f_grad(theta)
        return np.outer(g, g) + (self.f(theta) - 1.0) * self._f_hess

    def third_dir(self, theta, m):
        # grad L = (f-1) grad f with grad f linear, so the third derivative is
        # <F, M> grad f + 2 F M grad f for the constant F = hess f.
        m = symmetrize(np.asarray(m, dtype=float))
        g = self.f_grad(theta)
        return float(np.sum(self._f_hess * m)) * g + 2.0 * self._f_hess @ (m @ g)

    def sample_grad(self, theta, rng, batch=None):
        n = 1 if batch is None else int(batch)
        deltas = rng.choice(np.array([-self.noise_magnitude, self.noise_magnitude]), size=n)
        return (self.f(theta) - 1.0 - float(np.mean(deltas))) * self.f_grad(theta)

    def noise_cov(self, theta):
        g = self.f_grad(theta)
        return self.noise_magnitude**2 * np.outer(g, g)

    def alpha(self):
        return self.noise_magnitude**2

    def manifold_residual(self, theta):
        return abs(self.f(theta) - 1.0)

    # --- ellipse geometry helpers used by the harness ---

    def angle(self, theta: Array) -> float:
        """Elliptic angle phi with u = a*sqrt(2)*cos(phi), w = b*sqrt(2)*sin(phi)."""
        x, y = theta
        u, w = x + y, y - x
        return float(np.arctan2(w / (self.b * np.sqrt(2)), u / (self.a * np.sqrt(2))))

    def point_at(self, phi: float) -> Array:
        u = self.a * np.sqrt(2) * np.cos(phi)
        w = self.b * np.sqrt(2) * np.sin(phi)
        return np.array([(u - w) / 2.0, (u + w) / 2.0])

    def tip_points(self) -> Array:
        """The two flattest minimizers (for a > b these sit at phi = 0, pi)."""
        return np.stack([self.point_at(0.0), self.point_at(np.pi)])

    def axis_crossings(self) -> Array:
        """The four points of the ellipse on the coordinate axes."""
        s = self.a * self.b * np.sqrt(2.0 / (self.a**2 + self.b**2))
        return np.array([[s, 0.0], [-s, 0.0], [0.0, s], [0.0, -s]])

    def to_config(self):
        return {"kind": self.kind, "a": self.a, "b": self.b,
                "noise_magnitude": self.noise_magnitude}

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)


@_register
class DiagNetProblem(Problem):
    """Sparse linear regression with a diagonal linear network.

    Parameters theta = (a, b) in R^{2d}; the estimate is w_hat = a^2 - b^2
    (elementwise).  Data rows z_i are Rademacher, labels y_i = <z_i, w_star>,
    and each training step adds fresh Gaussian noise to the sampled labels.
    """

    kind = "diagnet"

    def __init__(self, z: Array, w_star: Array, noise_std: float,
                 batch_size: int = 1, seed: int | None = None):
        self.z = np.asarray(z, dtype=float)
        self.w_star = np.asarray(w_star, dtype=float)
        self.n, self.d = self.z.shape
        self.dim = 2 * self.d
        self.y = self.z @ self.w_star
        self.noise_std = float(noise_std)
        self.batch_size = int(batch_size)
        self.seed = seed

    @classmethod
    def generate(cls, d: int, n: int, kappa: int, noise_std: float, rng: Rng,
                 batch_size: int = 1, seed: int | None = None) -> "DiagNetProblem":
        if kappa > d:
            raise ValueError(f"kappa={kappa} exceeds d={d}")
        if n < 1:
            raise ValueError("need at least one sample")
        z = rng.rademacher(size=(n, d))
        w = np.zeros(d)
        support = rng.generator.permutation(d)[:kappa]
        w[support] = rng.rademacher(size=kappa)
        return cls(z, w, noise_std, batch_size=batch_size, seed=seed)

    def _split(self, theta):
        return theta[: self.d], theta[self.d:]

    def w_hat(self, theta: Array) -> Array:
        a, b = self._split(theta)
        return a**2 - b**2

    def residuals(self, theta: Array) -> Array:
        return self.z @ self.w_hat(theta) - self.y

    def _model_grads(self, theta: Array) -> Array:
        """Rows g_i = d<z_i, w_hat>/dtheta, an (n, 2d) matrix."""
        a, b = self._split(theta)
        return np.hstack([2.0 * self.z * a, -2.0 * self.z * b])

    def loss(self, theta):
        r = self.residuals(theta)
        return 0.5 * float(np.mean(r**2)) + 0.5 * self.noise_std**2

    def grad(self, theta):
        a, b = self._split(theta)
        zr = self.z.T @ self.residuals(theta) / self.n
        return np.concatenate([2.0 * a * zr, -2.0 * b * zr])

    def hessian(self, theta):
        g = self._model_grads(theta)
        h = g.T @ g / self.n
        zr = 2.0 * (self.z.T @ self.residuals(theta)) / self.n
        idx = np.arange(self.d)
        h[idx, idx] += zr
        h[self.d + idx, self.d + idx] -= zr
        return symmetrize(h)

    def hessian_diag(self, theta):
        g = self._model_grads(theta)
        diag = np.sum(g**2, axis=0) / self.n
        zr = 2.0 * (self.z.T @ self.residuals(theta)) / self.n
        return diag + np.concatenate([zr, -zr])

    def hessian_trace(self, theta):
        return float(np.sum(self.hessian_diag(theta)))

    def third_dir(self, theta, m):
        # With g_i = D_i theta and D_i = Diag(2 z_i, -2 z_i) constant:
        # grad H[M] = (1/n) sum_i [2 D_i M g_i + <D_i, M> g_i].
        m = symmetrize(np.asarray(m, dtype=float))
        g = self._model_grads(theta)  # (n, 2d)
        dmat = np.hstack([2.0 * self.z, -2.0 * self.z])  # rows d_i
        mg = g @ m.T  # rows M g_i
        term1 = 2.0 * np.sum(dmat * mg, axis=0) / self.n
        coeff = dmat @ np.diag(m)  # <D_i, M> per sample
        term2 = g.T @ coeff / self.n
        return term1 + term2

    def sample_grad(self, theta, rng, batch=None):
        bsz = self.batch_size if batch is None else int(batch)
        a, b = self._split(theta)
        if bsz == 1:
            i = int(rng.integers(0, self.n))
            z_i = self.z[i]
            r = float(z_i @ (a * a) - z_i @ (b * b) - self.y[i]
                      - rng.normal(scale=self.noise_std))
            zr = r * z_i
        else:
            idx = rng.integers(0, self.n, size=bsz)
            eps = rng.normal(size=bsz, scale=self.noise_std)
            zb = self.z[idx]
            rb = zb @ self.w_hat(theta) - self.y[idx] - eps
            zr = zb.T @ rb / bsz
        return np.concatenate([2.0 * a * zr, -2.0 * b * zr])

    def noise_cov(self, theta):
        # Exact covariance of a size-B i.i.d. batch: (1/B) * per-sample cov.
        g = self._model_grads(theta)
        r = self.residuals(theta)
        w = (r**2 + self.noise_std**2) / self.n
        second = g.T @ (g * w[:, None])
        gbar = g.T @ r / self.n
        return symmetrize((second - np.outer(gbar, gbar)) / self.batch_size)

    def alpha(self):
        return self.noise_std**2 / self.batch_size

    def manifold_residual(self, theta):
        return float(np.max(np.abs(self.residuals(theta))))

    def test_loss(self, theta: Array) -> float:
        """Exact expected squared error on fresh Rademacher data."""
        return float(np.sum((self.w_hat(theta) - self.w_star) ** 2))

    def manifold_point(self) -> Array:
        """Exact-fit parameters: a = sqrt(max(w*, 0)), b = sqrt(max(-w*, 0))."""
        return np.concatenate([np.sqrt(np.clip(self.w_star, 0, None)),
                               np.sqrt(np.clip(-self.w_star, 0, None))])

    def to_config(self):
        return {
            "kind": self.kind, "d": self.d, "n": self.n,
            "noise_std": self.noise_std, "batch_size": self.batch_size,
            "seed": self.seed, "kappa": int(np.count_nonzero(self.w_star)),
            "checksum": _checksum(self.z, self.w_star),
        }

    @classmethod
    def from_config(cls, cfg):
        if cfg.get("seed") is None:
            raise ValueError("diagnet config without a seed cannot be replayed")
        prob = cls.generate(cfg["d"], cfg["n"], cfg["kappa"], cfg["noise_std"],
                            Rng(cfg["seed"]), batch_size=cfg.get("batch_size", 1),
                            seed=cfg["seed"])
        want = cfg.get("checksum")
        got = _checksum(prob.z, prob.w_star)
        if want is not None and want != got:
            raise ValueError(f"diagnet data checksum mismatch: {got} != {want}")
        return prob


@_register
class MatrixFacProblem(Problem):
    """Deep matrix factorization from Gaussian linear measurements.

    Parameters are the layers W_1..W_L (theta is their concatenated C-order
    ravel), the end-to-end map is E = W_L ... W_1, measurements are
    b_i = <A_i, M*>, and the per-step loss is (1/B) sum (<A_i, E> - b_i + xi)^2
    with fresh Gaussian label noise xi.
    """

    kind = "matfac"

    def __init__(self, dims: list[int], a_meas: Array, m_star: Array,
                 sigma: float, batch_size: int, seed: int | None = None):
        self.dims = [int(x) for x in dims]
        lo = min(self.dims[0], self.dims[-1])
        if any(di < lo for di in self.dims):
            raise ValueError(f"every layer dim must be >= min(d0, dL)={lo}, got {dims}")
        self.n_layers = len(self.dims) - 1
        self.a_meas = np.asarray(a_meas, dtype=float)  # (n, dL, d0)
        self.m_star = np.asarray(m_star, dtype=float)
        self.n = self.a_meas.shape[0]
        self.b = np.einsum("nij,ij->n", self.a_meas, self.m_star)
        self.sigma = float(sigma)
        self.batch_size = int(batch_size)
        self.seed = seed
        self._shapes = [(self.dims[i + 1], self.dims[i]) for i in range(self.n_layers)]
        self._sizes = [r * c for r, c in self._shapes]
        self.dim = int(sum(self._sizes))

    @classmethod
    def generate(cls, dims: list[int], rank: int, n_meas: int, batch: int,
                 sigma: float, rng: Rng, seed: int | None = None) -> "MatrixFacProblem":
        dl, d0 = dims[-1], dims[0]
        u = rng.normal(size=(dl, rank))
        v = rng.normal(size=(rank, d0))
        m_star = u @ v / np.sqrt(rank * dl)
        a = rng.normal(size=(n_meas, dl, d0)) / np.sqrt(dl * d0)
        return cls(dims, a, m_star, sigma, batch, seed=seed)

    def unpack(self, theta: Array) -> list[Array]:
        out, off = [], 0
        for (r, c), sz in zip(self._shapes, self._sizes):
            out.append(theta[off:off + sz].reshape(r, c))
            off += sz
        return out

    def pack(self, ws: list[Array]) -> Array:
        return np.concatenate([w.ravel() for w in ws])

    def end_to_end(self, theta: Array) -> Array:
        ws = self.unpack(theta)
        e = ws[0]
        for w in ws[1:]:
            e = w @ e
        return e

    def _chain_grad(self, ws: list[Array], a: Array) -> list[Array]:
        """Per-layer gradients of <A, W_L ... W_1>."""
        L = len(ws)
        left = [None] * L   # product of layers above j (W_L ... W_{j+1})
        right = [None] * L  # product of layers below j (W_{j-1} ... W_1)
        acc = np.eye(ws[-1].shape[0])
        for j in range(L - 1, -1, -1):
            left[j] = acc
            acc = acc @ ws[j]
        acc = np.eye(ws[0].shape[1])
        for j in range(L):
            right[j] = acc
            acc = ws[j] @ acc
        return [left[j].T @ a @ right[j].T for j in range(L)]

    def _meas_grad(self, theta: Array, a: Array) -> Array:
        """Flat gradient of theta -> <A, end_to_end(theta)>."""
        return self.pack(self._chain_grad(self.unpack(theta), a))

    def residuals(self, theta: Array) -> Array:
        e = self.end_to_end(theta)
        return np.einsum("nij,ij->n", self.a_meas, e) - self.b

    def loss(self, theta):
        r = self.residuals(theta)
        return float(np.mean(r**2)) + self.sigma**2

    def train_mse(self, theta: Array) -> float:
        return float(np.mean(self.residuals(theta) ** 2))

    def test_loss(self, theta: Array) -> float:
        """Exact expected squared error on fresh Gaussian measurements."""
        delta = self.end_to_end(theta) - self.m_star
        # Measurement entries are N(0, 1/(dL*d0)), so E<A, D>^2 = ||D||_F^2/(dL*d0).
        return float(np.sum(delta**2)) / (self.dims[-1] * self.dims[0])

    def grad(self, theta):
        r = self.residuals(theta)
        t = np.einsum("n,nij->ij", r, self.a_meas) * (2.0 / self.n)
        return self._meas_grad(theta, t)

    def _meas_grad_matrix(self, theta: Array) -> Array:
        """Rows G_i = flat gradient of <A_i, E>, an (n, dim) matrix."""
        ws = self.unpack(theta)
        rows = np.empty((self.n, self.dim))
        for i in range(self.n):
            rows[i] = self.pack(self._chain_grad(ws, self.a_meas[i]))
        return rows

    def _bilinear_hvp(self, ws: list[Array], a: Array, us: list[Array]) -> Array:
        """Gradient of W -> sum_j d<A, E>/dW_j [U_j], i.e. the Hessian of the
        multilinear measurement form applied to the flat direction u."""
        L = len(ws)
        out = [np.zeros_like(w) for w in ws]
        for j in range(L):
            chain = list(ws)
            chain[j] = us[j]
            # gradient w.r.t. every slot k != j of <A, prod(chain)>
            grads = self._chain_grad(chain, a)
            for k in range(L):
                if k != j:
                    out[k] += grads[k]
        return self.pack(out)

    def hvp(self, theta: Array, u: Array) -> Array:
        """Exact Hessian-vector product."""
        ws = self.unpack(theta)
        us = self.unpack(u)
        g = self._meas_grad_matrix(theta)
        r = self.residuals(theta)
        t = np.einsum("n,nij->ij", r, self.a_meas)
        lin = g.T @ (g @ u)
        cross = self._bilinear_hvp(ws, t, us)
        return (2.0 / self.n) * (lin + cross)

    def hessian(self, theta):
        g = self._meas_grad_matrix(theta)
        r = self.residuals(theta)
        t = np.einsum("n,nij->ij", r, self.a_meas)
        ws = self.unpack(theta)
        h = g.T @ g
        eye = np.eye(self.dim)
        for p in range(self.dim):
            h[:, p] += self._bilinear_hvp(ws, t, self.unpack(eye[p]))
        return symmetrize(2.0 / self.n * h)

    def hessian_diag(self, theta):
        # The measurement form is linear in each layer, so the residual part of
        # the Hessian has zero block diagonals; only G^T G contributes.
        g = self._meas_grad_matrix(theta)
        return (2.0 / self.n) * np.sum(g**2, axis=0)

    def hessian_trace(self, theta):
        return float(np.sum(self.hessian_diag(theta)))

    def third_dir(self, theta, m):
        # Central finite differences of the exact HVP along the eigenvectors
        # of M (analytic third derivatives are not worth the cost here).
        m = symmetrize(np.asarray(m, dtype=float))
        w, q = np.linalg.eigh(m)
        out = np.zeros(self.dim)
        scale = 1.0 + float(np.linalg.norm(theta))
        h = 1e-5 * scale
        for lam, vec_k in zip(w, q.T):
            if abs(lam) < 1e-14 * max(1.0, float(np.max(np.abs(w)))):
                continue
            hp = self.hvp(theta + h * vec_k, vec_k)
            hm = self.hvp(theta - h * vec_k, vec_k)
            out += lam * (hp - hm) / (2 * h)
        return out

    def sample_grad(self, theta, rng, batch=None):
        bsz = self.batch_size if batch is None else int(batch)
        idx = rng.integers(0, self.n, size=bsz)
        xi = rng.normal(size=bsz, scale=self.sigma)
        e = self.end_to_end(theta)
        rb = np.einsum("nij,ij->n", self.a_meas[idx], e) - self.b[idx] + xi
        t = np.einsum("n,nij->ij", rb, self.a_meas[idx]) * (2.0 / bsz)
        return self._meas_grad(theta, t)

    def noise_cov(self, theta, n_samples: int = 2000, seed: int = 0):
        """Empirical gradient-noise covariance (sample covariance of draws)."""
        rng = Rng(seed if self.seed is None else self.seed * 7919 + seed)
        mean = self.grad(theta)
        acc = np.zeros((self.dim, self.dim))
        for _ in range(n_samples):
            z = self.sample_grad(theta, rng) - mean
            acc += np.outer(z, z)
        return acc / n_samples

    def alpha(self):
        return 2.0 * self.sigma**2 / self.batch_size

    def manifold_residual(self, theta):
        return float(np.max(np.abs(self.residuals(theta))))

    def init_point(self, rng: Rng, scale: float = 0.1) -> Array:
        return self.pack([scale * rng.normal(size=s) / np.sqrt(s[1]) for s in self._shapes])

    def to_config(self):
        return {
            "kind": self.kind, "dims": self.dims, "sigma": self.sigma,
            "batch_size": self.batch_size, "n_meas": self.n, "seed": self.seed,
            "rank": int(np.linalg.matrix_rank(self.m_star, tol=1e-8)),
            "checksum": _checksum(self.a_meas, self.m_star),
        }

    @classmethod
    def from_config(cls, cfg):
        if cfg.get("seed") is None:
            raise ValueError("matfac config without a seed cannot be replayed")
        prob = cls.generate(cfg["dims"], cfg["rank"], cfg["n_meas"], cfg["batch_size"],
                            cfg["sigma"], Rng(cfg["seed"]), seed=cfg["seed"])
        want = cfg.get("checksum")
        got = _checksum(prob.a_meas, prob.m_star)
        if want is not None and want != got:
            raise ValueError(f"matfac data checksum mismatch: {got} != {want}")
        return prob


@_register
class QuadraticProblem(Problem):
    """Fixed quadratic L = 1/2 theta^T H0 theta with synthetic gradient noise.

    The noise covariance is either alpha * H0 (label-noise form) or an
    explicit sigma0.  Oracle for projection and slow-dynamics tests: the
    Hessian is constant and the third derivative vanishes.
    """

    kind = "quadratic"

    def __init__(self, h0: Array, alpha: float | None = None,
                 sigma0: Array | None = None):
        self.h0 = symmetrize(np.asarray(h0, dtype=float))
        self.dim = self.h0.shape[0]
        if sigma0 is None:
            if alpha is None:
                alpha = 0.0
            sigma0 = alpha * self.h0
        self._alpha = alpha
        self.sigma0 = symmetrize(np.asarray(sigma0, dtype=float))
        self._sqrt_sigma = psd_sqrt(self.sigma0) if np.any(self.sigma0) else np.zeros_like(self.sigma0)

    def loss(self, theta):
        return 0.5 * float(theta @ self.h0 @ theta)

    def grad(self, theta):
        return self.h0 @ theta

    def hessian(self, theta):
        return self.h0.copy()

    def third_dir(self, theta, m):
        return np.zeros(self.dim)

    def sample_grad(self, theta, rng, batch=None):
        bsz = 1 if batch is None else int(batch)
        noise = self._sqrt_sigma @ rng.normal(size=self.dim) / np.sqrt(bsz)
        return self.h0 @ theta + noise

    def noise_cov(self, theta):
        return self.sigma0.copy()

    def alpha(self):
        if self._alpha is None:
            raise ValueError("this quadratic does not use label-noise covariance")
        return self._alpha

    def manifold_residual(self, theta):
        return float(np.max(np.abs(self.h0 @ theta))) if self.dim else 0.0

    def to_config(self):
        return {"kind": self.kind, "h0": self.h0.tolist(), "alpha": self._alpha,
                "sigma0": self.sigma0.tolist()}

    @classmethod
    def from_config(cls, cfg):
        return cls(np.array(cfg["h0"]), alpha=cfg.get("alpha"),
                   sigma0=np.array(cfg["sigma0"]) if cfg.get("sigma0") is not None else None)


@_register
class SeparableCubicProblem(Problem):
    """Separable cubic loss on a matrix parameter: L = sum w_ij Theta_ij^3 / 3.

    The Hessian Diag(2 w . Theta) is exactly diagonal with position-dependent
    entries (PSD on Theta > 0), which is the regime where the Shampoo drift
    field is provably not a gradient field while Adam's is.  There is no
    minimizer manifold; the residual reported is the sup-norm of the gradient.
    """

    kind = "separable_cubic"

    def __init__(self, weights: Array, alpha: float = 1.0):
        self.weights = np.asarray(weights, dtype=float)
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        self.matrix_shape = self.weights.shape
        self._w_flat = self.weights.ravel(order="F")
        self.dim = self._w_flat.size
        self._alpha = float(alpha)

    def loss(self, theta):
        return float(np.sum(self._w_flat * theta**3) / 3.0)

    def grad(self, theta):
        return self._w_flat * theta**2

    def hessian(self, theta):
        return np.diag(2.0 * self._w_flat * theta)

    def hessian_diag(self, theta):
        return 2.0 * self._w_flat * theta

    def third_dir(self, theta, m):
        return 2.0 * self._w_flat * np.diag(np.asarray(m, dtype=float))

    def sample_grad(self, theta, rng, batch=None):
        return self.grad(theta) + psd_sqrt(self._alpha * self.hessian(theta)) @ rng.normal(size=self.dim)

    def noise_cov(self, theta):
        return self._alpha * self.hessian(theta)

    def alpha(self):
        return self._alpha

    def manifold_residual(self, theta):
        return float(np.max(np.abs(self.grad(theta))))

    def to_config(self):
        return {"kind": self.kind, "weights": self.weights.tolist(), "alpha": self._alpha}

    @classmethod
    def from_config(cls, cfg):
        return cls(np.array(cfg["weights"]), alpha=cfg.get("alpha", 1.0))
