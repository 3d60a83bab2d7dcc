"""Hessian-based sharpness metrics and the Hutchinson diagonal estimator."""
from __future__ import annotations

import numpy as np

from ..numerics import Array, Rng
from ..problems import Problem

# Above this parameter count, Hessian diagonals fall back to Hutchinson probes.
EXACT_DIAG_MAX_DIM = 400
HUTCHINSON_PROBES = 256


def hutchinson_diag(matvec, dim: int, probes: int, rng: Rng) -> tuple[Array, Array]:
    """Unbiased diagonal estimate from Rademacher probes z * (H z).

    Returns (estimate, standard error per coordinate).
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    acc = np.zeros(dim)
    acc2 = np.zeros(dim)
    for _ in range(probes):
        z = rng.rademacher(size=dim)
        hz = z * matvec(z)
        acc += hz
        acc2 += hz**2
    mean = acc / probes
    var = np.clip(acc2 / probes - mean**2, 0.0, None)
    return mean, np.sqrt(var / probes)


def hessian_diag_estimate(problem: Problem, theta: Array,
                          probes: int = HUTCHINSON_PROBES,
                          seed: int = 0) -> Array:
    """Hessian diagonal: exact when cheap, Hutchinson probes otherwise."""
    if problem.dim <= EXACT_DIAG_MAX_DIM or hasattr(problem, "hessian_diag"):
        return problem.hessian_diag(theta)
    rng = Rng(seed)
    est, _ = hutchinson_diag(lambda z: problem.hvp(theta, z), problem.dim, probes, rng)
    return est


def tr_h(problem: Problem, theta: Array) -> float:
    """tr(H), the sharpness measure reduced by label-noise SGD."""
    return problem.hessian_trace(theta)


def tr_diag_sqrt(problem: Problem, theta: Array) -> float:
    """tr(Diag(H)^{1/2}), the sharpness measure reduced by Adam."""
    diag = np.clip(hessian_diag_estimate(problem, theta), 0.0, None)
    return float(np.sum(np.sqrt(diag)))


def tr_diag_pow(problem: Problem, theta: Array, exponent: float) -> float:
    diag = np.clip(hessian_diag_estimate(problem, theta), 0.0, None)
    return float(np.sum(diag**exponent))
