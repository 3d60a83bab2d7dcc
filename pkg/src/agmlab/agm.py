"""General adaptive-gradient method: state (theta, m, v), pluggable V and S maps.

The update is

    m <- beta1 * m + (1 - beta1) * g
    v <- beta2 * v + (1 - beta2) * V(g g^T)
    theta <- theta - eta * S(v) m

with no bias correction and no weight decay.  beta2 is tied to the learning
rate through the 2-scheme coupling 1 - beta2 = c * eta^2.  V is represented
twice: ``vmap(g)`` evaluates V(g g^T) without forming the outer product, and
``vmat(M)`` evaluates V on a full matrix (needed by the slow dynamics).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Array, Rng, inv_sqrt_psd, kron, unvec, vec
from .problems import Problem

_DIVISOR_CLAMP = 1e-30


class AgmError(RuntimeError):
    """Raised when an optimizer step cannot proceed (e.g. NaN gradient)."""


# --- preconditioner representations ---


class Preconditioner:
    """Symmetric positive-definite S in one of three compact forms."""

    def apply(self, x: Array) -> Array:
        raise NotImplementedError

    def materialize(self) -> Array:
        raise NotImplementedError

    def sqrt(self) -> "Preconditioner":
        raise NotImplementedError

    def inv(self) -> "Preconditioner":
        raise NotImplementedError


@dataclass(frozen=True)
class DiagonalPreconditioner(Preconditioner):
    scale: Array

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=float)
        lo, hi = float(np.min(s)), float(np.max(s))  # single-pass hot-path check
        if not (lo > 0.0) or not np.isfinite(hi):
            raise AgmError("diagonal preconditioner entries must be positive and finite")
        object.__setattr__(self, "scale", s)

    def apply(self, x):
        return self.scale * x

    def materialize(self):
        return np.diag(self.scale)

    def sqrt(self):
        return DiagonalPreconditioner(np.sqrt(self.scale))

    def inv(self):
        return DiagonalPreconditioner(1.0 / self.scale)


@dataclass(frozen=True)
class BlockConstantPreconditioner(Preconditioner):
    """One positive scalar per parameter block (Adam-mini / Adalayer)."""

    blocks: tuple
    values: Array
    dim: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(~np.isfinite(v)) or np.any(v <= 0):
            raise AgmError("block preconditioner values must be positive and finite")
        object.__setattr__(self, "values", v)
        full = np.empty(self.dim)
        for idx, val in zip(self.blocks, v):
            full[idx] = val
        object.__setattr__(self, "_full", full)

    @property
    def is_scalar_multiple_of_identity(self) -> bool:
        return len(self.blocks) == 1

    def apply(self, x):
        return self._full * x

    def materialize(self):
        return np.diag(self._full)

    def sqrt(self):
        return BlockConstantPreconditioner(self.blocks, np.sqrt(self.values), self.dim)

    def inv(self):
        return BlockConstantPreconditioner(self.blocks, 1.0 / self.values, self.dim)


@dataclass(frozen=True)
class KroneckerPreconditioner(Preconditioner):
    """S x = vec(L X R) for symmetric PD factors L (d1 x d1) and R (d2 x d2).

    With column-major vec this equals (R kron L) x.
    """

    left: Array
    right: Array

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[0]

    def apply(self, x):
        xm = unvec(x, self.shape)
        return vec(self.left @ xm @ self.right)

    def materialize(self):
        return kron(self.right, self.left)

    def sqrt(self):
        from .numerics import psd_sqrt
        return KroneckerPreconditioner(psd_sqrt(self.left), psd_sqrt(self.right))

    def inv(self):
        return KroneckerPreconditioner(np.linalg.inv(self.left), np.linalg.inv(self.right))


# --- optimizer specification and state ---


@dataclass(frozen=True)
class AgmSpec:
    """An optimizer definition within the adaptive-gradient family."""

    name: str
    d: int
    second_moment_dim: int
    beta1: float
    eta: float
    c: float  # 2-scheme constant: 1 - beta2 = c * eta^2
    eps: float
    vmap: Callable[[Array], Array]
    vmat: Callable[[Array], Array]
    smap: Callable[[Array], Preconditioner]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.beta1 <= 0.9:
            raise AgmError(f"beta1 must lie in [0, 0.9], got {self.beta1}")
        if self.eta <= 0:
            raise AgmError(f"eta must be positive, got {self.eta}")
        if self.c <= 0:
            raise AgmError(f"c must be positive, got {self.c}")
        if self.eps < 0:
            raise AgmError(f"eps must be nonnegative, got {self.eps}")
        if not 0.0 < self.beta2 < 1.0:
            raise AgmError(f"1 - c*eta^2 = {self.beta2} is not a valid beta2")

    @property
    def beta2(self) -> float:
        return 1.0 - self.c * self.eta**2

    def with_eta(self, eta: float) -> "AgmSpec":
        """Same optimizer at a different learning rate, c held fixed."""
        meta = dict(self.meta)
        meta["eta"] = eta
        meta.pop("beta2", None)
        return make_spec(**meta)

    def to_config(self) -> dict:
        return dict(self.meta)


@dataclass
class AgmState:
    theta: Array
    m: Array
    v: Array
    k: int = 0

    def validate(self):
        if np.any(self.v < 0):
            raise AgmError(f"second-moment vector went negative at step {self.k}")
        for name, arr in (("theta", self.theta), ("m", self.m), ("v", self.v)):
            if np.any(~np.isfinite(arr)):
                raise AgmError(f"non-finite {name} at step {self.k}")

    def to_config(self) -> dict:
        return {"theta": self.theta.tolist(), "m": self.m.tolist(),
                "v": self.v.tolist(), "k": self.k}

    @classmethod
    def from_config(cls, cfg: dict) -> "AgmState":
        return cls(np.array(cfg["theta"]), np.array(cfg["m"]),
                   np.array(cfg["v"]), int(cfg["k"]))


def init_state(spec: AgmSpec, theta0: Array) -> AgmState:
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.size != spec.d:
        raise AgmError(f"theta0 has {theta0.size} entries, spec expects {spec.d}")
    return AgmState(theta=theta0.copy(), m=np.zeros(spec.d),
                    v=np.zeros(spec.second_moment_dim), k=0)


# --- builders for the optimizer table ---


def _default_c(eta: float, c: float | None, beta2: float | None) -> float:
    if beta2 is not None:
        return (1.0 - beta2) / eta**2
    if c is not None:
        return c
    return 0.001 / eta**2  # beta2 = 0.999 at the configured base eta


def _guarded_divisor(x: Array, eps: float) -> Array:
    div = x + eps
    if eps == 0.0 and np.any(div <= _DIVISOR_CLAMP):
        warnings.warn("zero second-moment entry with eps=0; divisor clamped",
                      RuntimeWarning, stacklevel=3)
        div = np.maximum(div, _DIVISOR_CLAMP)
    return div


def make_sgd(d: int, eta: float, beta1: float = 0.0, c: float | None = None,
             beta2: float | None = None) -> AgmSpec:
    ones = np.ones(d)
    return AgmSpec(
        name="sgd", d=d, second_moment_dim=d, beta1=beta1, eta=eta,
        c=_default_c(eta, c, beta2), eps=0.0,
        vmap=lambda g: ones.copy(),
        vmat=lambda m: ones.copy(),
        smap=lambda v: DiagonalPreconditioner(np.ones(d)),
        meta={"kind": "sgd", "d": d, "eta": eta, "beta1": beta1,
              "c": _default_c(eta, c, beta2)},
    )


def make_adam(d: int, eta: float, beta1: float = 0.9, c: float | None = None,
              beta2: float | None = None, eps: float = 1e-8, name: str = "adam") -> AgmSpec:
    cc = _default_c(eta, c, beta2)
    return AgmSpec(
        name=name, d=d, second_moment_dim=d, beta1=beta1, eta=eta, c=cc, eps=eps,
        vmap=lambda g: g * g,
        vmat=lambda m: np.diag(m).copy(),
        smap=lambda v: DiagonalPreconditioner(1.0 / _guarded_divisor(np.sqrt(np.clip(v, 0, None)), eps)),
        meta={"kind": "adam", "d": d, "eta": eta, "beta1": beta1, "c": cc, "eps": eps},
    )


def make_rmsprop(d: int, eta: float, c: float | None = None,
                 beta2: float | None = None, eps: float = 1e-8) -> AgmSpec:
    """RMSProp is Adam with beta1 = 0."""
    spec = make_adam(d, eta, beta1=0.0, c=c, beta2=beta2, eps=eps, name="rmsprop")
    meta = dict(spec.meta)
    meta.pop("beta1")
    meta["kind"] = "rmsprop"
    object.__setattr__(spec, "meta", meta)
    return spec


def make_adame(d: int, eta: float, lam: float, beta1: float = 0.9,
               c: float | None = None, beta2: float | None = None,
               eps: float = 1e-8) -> AgmSpec:
    if not 0.0 <= lam < 1.0:
        raise AgmError(f"AdamE exponent must lie in [0, 1), got {lam}")
    cc = _default_c(eta, c, beta2)
    return AgmSpec(
        name=f"adame-{lam:g}", d=d, second_moment_dim=d, beta1=beta1, eta=eta,
        c=cc, eps=eps,
        vmap=lambda g: g * g,
        vmat=lambda m: np.diag(m).copy(),
        smap=lambda v: DiagonalPreconditioner(1.0 / _guarded_divisor(np.clip(v, 0, None) ** lam, eps)),
        meta={"kind": "adame", "d": d, "eta": eta, "lam": lam, "beta1": beta1,
              "c": cc, "eps": eps},
    )


def _check_partition(d: int, blocks) -> tuple:
    idx_blocks = tuple(np.asarray(b, dtype=int) for b in blocks)
    seen = np.zeros(d, dtype=bool)
    for b in idx_blocks:
        if b.size == 0:
            raise AgmError("empty partition block")
        if np.any(seen[b]):
            raise AgmError("partition blocks overlap")
        seen[b] = True
    if not np.all(seen):
        raise AgmError("partition does not cover every coordinate")
    return idx_blocks


def make_adam_mini(d: int, eta: float, blocks, beta1: float = 0.9,
                   c: float | None = None, beta2: float | None = None,
                   eps: float = 1e-8, name: str = "adam-mini") -> AgmSpec:
    idx_blocks = _check_partition(d, blocks)
    cc = _default_c(eta, c, beta2)

    def vmap(g):
        out = np.empty(d)
        for b in idx_blocks:
            out[b] = np.mean(g[b] ** 2)
        return out

    def vmat(m):
        diag = np.diag(m)
        out = np.empty(d)
        for b in idx_blocks:
            out[b] = np.mean(diag[b])
        return out

    def smap(v):
        vals = np.array([np.mean(np.clip(v[b], 0, None)) for b in idx_blocks])
        return BlockConstantPreconditioner(
            idx_blocks, 1.0 / _guarded_divisor(np.sqrt(vals), eps), d)

    return AgmSpec(
        name=name, d=d, second_moment_dim=d, beta1=beta1, eta=eta, c=cc, eps=eps,
        vmap=vmap, vmat=vmat, smap=smap,
        meta={"kind": "adam_mini" if name == "adam-mini" else "adalayer",
              "d": d, "eta": eta, "blocks": [b.tolist() for b in idx_blocks],
              "beta1": beta1, "c": cc, "eps": eps},
    )


def make_adalayer(d: int, eta: float, layers, beta1: float = 0.9,
                  c: float | None = None, beta2: float | None = None,
                  eps: float = 1e-8) -> AgmSpec:
    """Adam-mini with layer-sized blocks."""
    return make_adam_mini(d, eta, layers, beta1=beta1, c=c, beta2=beta2,
                          eps=eps, name="adalayer")


def shampoo_vmat(m: Array, shape: tuple[int, int]) -> Array:
    """V(M) = (vec(V_L(M)), vec(V_R(M))) for the column-major 4-index layout."""
    d1, d2 = shape
    m4 = np.asarray(m, dtype=float).reshape(d1, d2, d1, d2, order="F")
    vl = np.einsum("isjs->ij", m4)
    vr = np.einsum("slsm->lm", m4)
    return np.concatenate([vec(vl), vec(vr)])


def shampoo_vectorize(g_matrix: Array) -> tuple[Array, Array]:
    """Second-moment statistics of one gradient: mat_L(v_L) = G G^T, mat_R(v_R) = G^T G."""
    g = np.asarray(g_matrix, dtype=float)
    return vec(g @ g.T), vec(g.T @ g)


def shampoo_mats(v: Array, shape: tuple[int, int]) -> tuple[Array, Array]:
    d1, d2 = shape
    return unvec(v[: d1 * d1], (d1, d1)), unvec(v[d1 * d1:], (d2, d2))


def make_shampoo(shape: tuple[int, int], eta: float, beta1: float = 0.0,
                 c: float | None = None, beta2: float | None = None,
                 eps: float = 1e-8, eig_floor: float = 1e-12) -> AgmSpec:
    d1, d2 = int(shape[0]), int(shape[1])
    d = d1 * d2
    cc = _default_c(eta, c, beta2)

    def vmap(g):
        return np.concatenate(shampoo_vectorize(unvec(g, (d1, d2))))

    def smap(v):
        vl, vr = shampoo_mats(v, (d1, d2))
        left = inv_sqrt_psd(vl + eps * np.eye(d1), eig_floor)
        right = inv_sqrt_psd(vr + eps * np.eye(d2), eig_floor)
        return KroneckerPreconditioner(left=left, right=right)

    return AgmSpec(
        name="shampoo", d=d, second_moment_dim=d1 * d1 + d2 * d2, beta1=beta1,
        eta=eta, c=cc, eps=eps,
        vmap=vmap, vmat=lambda m: shampoo_vmat(m, (d1, d2)), smap=smap,
        meta={"kind": "shampoo", "shape": [d1, d2], "eta": eta, "beta1": beta1,
              "c": cc, "eps": eps},
    )


_BUILDERS = {
    "sgd": make_sgd,
    "adam": make_adam,
    "rmsprop": make_rmsprop,
    "adame": make_adame,
    "adam_mini": make_adam_mini,
    "adalayer": make_adalayer,
    "shampoo": make_shampoo,
}


def make_spec(kind: str, **params) -> AgmSpec:
    """Build an optimizer spec by kind name (the rows of the optimizer table)."""
    if kind not in _BUILDERS:
        raise AgmError(f"unknown optimizer kind {kind!r}; known: {sorted(_BUILDERS)}")
    return _BUILDERS[kind](**params)


def spec_from_config(cfg: dict) -> AgmSpec:
    cfg = dict(cfg)
    return make_spec(cfg.pop("kind"), **cfg)


# --- stepping and trajectories ---


def agm_step(spec: AgmSpec, state: AgmState, problem: Problem, rng: Rng,
             batch: int | None = None) -> AgmState:
    """One update of the general AGM recursion."""
    g = problem.sample_grad(state.theta, rng, batch)
    if not np.isfinite(g @ g):  # single-pass guard; details only on failure
        bad = int(np.argmax(~np.isfinite(g)))
        raise AgmError(
            f"non-finite gradient at step {state.k} (coordinate {bad}, "
            f"theta norm {np.linalg.norm(state.theta):.3e})")
    m = spec.beta1 * state.m + (1.0 - spec.beta1) * g
    v = spec.beta2 * state.v + (1.0 - spec.beta2) * spec.vmap(g)
    theta = state.theta - spec.eta * spec.smap(v).apply(m)
    return AgmState(theta=theta, m=m, v=v, k=state.k + 1)


@dataclass
class Trajectory:
    """Sparsely recorded run of a discrete optimizer."""

    steps: Array  # strictly increasing record indices
    columns: dict[str, Array]
    final_state: AgmState
    name: str = ""

    def column(self, key: str) -> Array:
        return self.columns[key]


def run(spec: AgmSpec, problem: Problem, steps: int, record_every: int,
        rng: Rng, theta0: Array | None = None, state: AgmState | None = None,
        metrics: dict[str, Callable[[Problem, Array], float]] | None = None,
        batch: int | None = None, check_every: int = 1000) -> Trajectory:
    """Run ``steps`` updates, recording loss and metrics on a sparse schedule.

    The final state is always recorded.  Deterministic given the rng seed.
    """
    if steps < 1:
        raise AgmError("steps must be >= 1")
    if state is None:
        if theta0 is None:
            raise AgmError("provide theta0 or a resumed state")
        state = init_state(spec, theta0)
    metrics = metrics or {}
    rec_steps: list[int] = []
    rec: dict[str, list[float]] = {"loss": []}
    for name in metrics:
        rec[name] = []

    def record(st: AgmState):
        rec_steps.append(st.k)
        rec["loss"].append(problem.loss(st.theta))
        for name, fn in metrics.items():
            rec[name].append(float(fn(problem, st.theta)))

    first = state.k
    for i in range(steps):
        state = agm_step(spec, state, problem, rng, batch)
        if state.k % check_every == 0:
            state.validate()
        if record_every > 0 and state.k % record_every == 0 and state.k != first + steps:
            record(state)
    record(state)
    return Trajectory(steps=np.array(rec_steps, dtype=int),
                      columns={k: np.array(vals) for k, vals in rec.items()},
                      final_state=state, name=spec.name)
