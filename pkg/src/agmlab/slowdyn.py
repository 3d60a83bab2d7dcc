"""Slow dynamics on the minimizer manifold: label-noise ODE, manifold SDE,
implicit-regularizer evaluators, fixed-point residuals, and the Shampoo
curl diagnostic.

Slow time is measured so that one unit corresponds to eta^{-2} discrete
optimizer steps.  The label-noise drift is

    d zeta = -(alpha/4) dPhi_S S grad3L[S] dt,

a tangent field, calibrated against discrete runs and consistent with the
S = I slow SDE; the preconditioner statistic follows dv = c (V(Sigma) - v) dt.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agm import AgmSpec, DiagonalPreconditioner, Preconditioner, make_shampoo
from .manifold import (ProjectionConfig, d2phi_s_rank1, dphi_s_on_manifold,
                       phi_s, sigma_decompose, vh_operator)
from .numerics import Array, Rng, psd_sqrt, sym_eig, symmetrize
from .problems import Problem

# Drift coefficient of the label-noise slow ODE, as a multiple of alpha.
# Thm-statement value would be 1/2; 1/4 is what discrete AGMs actually track
# and what the SGD slow SDE reduces to (see the decisions ledger).
LABEL_NOISE_DRIFT_COEF = 0.25


class RetractionError(RuntimeError):
    """The post-step projection back onto the manifold failed."""


@dataclass(frozen=True)
class SlowConfig:
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    retraction_residual_tol: float = 1e-8
    stage_residual_tol: float = 1e-2  # RK stages may sit slightly off-manifold
    max_halvings: int = 10
    diffusion_eig_cut: float = 1e-12


@dataclass
class SlowState:
    zeta: Array
    v: Array
    t: float = 0.0


def equilibrium_v(problem: Problem, spec: AgmSpec, zeta: Array) -> Array:
    """The v fixed point V(Sigma(zeta)) under label noise."""
    return spec.vmat(problem.alpha() * problem.hessian(zeta))


def _dphi_lax(problem, s_prec, zeta, cfg: SlowConfig):
    return dphi_s_on_manifold(problem, s_prec, zeta, cfg.projection,
                              residual_tol=cfg.stage_residual_tol,
                              strict_split=False)


def _ode_rhs(problem: Problem, spec: AgmSpec, zeta: Array, v: Array,
             cfg: SlowConfig) -> tuple[Array, Array]:
    # The drift dPhi_S S grad3L[S] is tangent to the manifold; the outer S of
    # the stated theorem does not survive the whitening transport of the SGD
    # slow SDE and overshoots discrete runs (see the decisions ledger).
    alpha = problem.alpha()
    s_prec = spec.smap(np.clip(v, 0.0, None))
    s_mat = s_prec.materialize()
    p_mat = _dphi_lax(problem, s_prec, zeta, cfg)
    field_vec = problem.third_dir(zeta, s_mat)
    dzeta = -LABEL_NOISE_DRIFT_COEF * alpha * (p_mat @ (s_mat @ field_vec))
    dv = spec.c * (spec.vmat(alpha * problem.hessian(zeta)) - v)
    return dzeta, dv


def _retract(problem: Problem, s_prec: Preconditioner, x: Array,
             cfg: SlowConfig) -> Array | None:
    r = phi_s(problem, s_prec, x, cfg.projection)
    if not r.converged:
        return None
    if problem.manifold_residual(r.point) > cfg.retraction_residual_tol:
        return None
    return r.point


def slow_ode_step(problem: Problem, spec: AgmSpec, state: SlowState, dt: float,
                  cfg: SlowConfig = SlowConfig()) -> SlowState:
    """One RK4 step of the label-noise slow ODE, followed by retraction.

    Stage points are retracted before evaluating the drift (the Hessian
    null-space split needs near-manifold points).  On retraction failure the
    step is halved, up to ``cfg.max_halvings``.
    """
    def stage(z, v):
        back = _retract(problem, spec.smap(np.clip(v, 0.0, None)), z, cfg)
        if back is None:
            return None
        return _ode_rhs(problem, spec, back, v, cfg)

    for attempt in range(cfg.max_halvings + 1):
        h = dt / 2**attempt
        z, v = state.zeta, state.v
        k1 = _ode_rhs(problem, spec, z, v, cfg)
        k2 = stage(z + 0.5 * h * k1[0], v + 0.5 * h * k1[1])
        k3 = stage(z + 0.5 * h * k2[0], v + 0.5 * h * k2[1]) if k2 is not None else None
        k4 = stage(z + h * k3[0], v + h * k3[1]) if k3 is not None else None
        if k4 is None:
            continue
        z_new = z + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v_new = np.clip(v + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]), 0.0, None)
        retracted = _retract(problem, spec.smap(v_new), z_new, cfg)
        if retracted is not None:
            return SlowState(zeta=retracted, v=v_new, t=state.t + h)
    raise RetractionError(
        f"retraction failed after {cfg.max_halvings} halvings at t={state.t:.4f}")


def _hatted_normal_noise(problem: Problem, s_prec: Preconditioner, zeta: Array,
                         sig_dia: Array, cfg: SlowConfig) -> Array:
    """V_H-weighted normal noise in whitened coordinates:
    P V_{H'}(P^{-1} Sigma_dia P^{-1}) P with P = S^{1/2}, H' = P H P."""
    p_w = s_prec.sqrt().materialize()
    p_w_inv = s_prec.inv().sqrt().materialize()
    h_white = symmetrize(p_w @ problem.hessian(zeta) @ p_w)
    inner = vh_operator(h_white, symmetrize(p_w_inv @ sig_dia @ p_w_inv),
                        cfg.projection.null_threshold)
    return symmetrize(p_w @ inner @ p_w)


def _sde_increment(problem: Problem, s_prec: Preconditioner, zeta: Array,
                   dt: float, noise: Array, cfg: SlowConfig,
                   sigma: Array | None = None) -> Array:
    """Euler-Maruyama increment of the manifold SDE for a fixed preconditioner.

    dzeta = dPhi_S A dW + (dPhi_S b + 1/2 d2Phi_S[A A^T]) dt with
    A = Sigma_par^{1/2} and b = -1/2 S grad3L[Sigma_hat_diamond].  This is the
    whitening transport of the S = I slow SDE; at S = I it reduces to it
    identically, and under label noise to the slow ODE drift.
    """
    if sigma is None:
        sigma = problem.noise_cov(zeta)
    s_mat = s_prec.materialize()
    p_mat = _dphi_lax(problem, s_prec, zeta, cfg)
    sig_par, sig_dia = sigma_decompose(problem, s_prec, zeta, cfg.projection, sigma=sigma)
    a_mat = psd_sqrt(sig_par)
    hat = _hatted_normal_noise(problem, s_prec, zeta, sig_dia, cfg)
    b_vec = -0.5 * s_mat @ problem.third_dir(zeta, hat)
    ito = np.zeros_like(zeta)
    e = sym_eig(sig_par)
    wmax = max(float(e.eigenvalues[-1]), 0.0)
    for lam, u in zip(e.eigenvalues, e.eigenvectors.T):
        if lam > cfg.diffusion_eig_cut * max(wmax, 1.0):
            ito += lam * d2phi_s_rank1(problem, s_prec, zeta, u, u, cfg.projection)
    diffusion = p_mat @ (a_mat @ noise) * np.sqrt(dt)
    drift = (p_mat @ b_vec + 0.5 * ito) * dt
    return diffusion + drift


def slow_sde_step(problem: Problem, spec: AgmSpec, state: SlowState, dt: float,
                  rng: Rng, cfg: SlowConfig = SlowConfig()) -> SlowState:
    """One Euler-Maruyama step of the coupled manifold SDE, then retraction."""
    noise = rng.normal(size=state.zeta.size)
    sigma = problem.noise_cov(state.zeta)
    for attempt in range(cfg.max_halvings + 1):
        h = dt / 2**attempt
        scale = np.sqrt(h / dt)  # reuse the same Gaussian draw across halvings
        s_prec = spec.smap(np.clip(state.v, 0.0, None))
        dz = _sde_increment(problem, s_prec, state.zeta, h, noise * scale, cfg,
                            sigma=sigma)
        v_new = np.clip(state.v + h * spec.c * (spec.vmat(sigma) - state.v), 0.0, None)
        retracted = _retract(problem, spec.smap(v_new), state.zeta + dz, cfg)
        if retracted is not None:
            return SlowState(zeta=retracted, v=v_new, t=state.t + h)
    raise RetractionError(
        f"retraction failed after {cfg.max_halvings} halvings at t={state.t:.4f}")


def sgd_slow_sde_step(problem: Problem, zeta: Array, dt: float, rng: Rng,
                      cfg: SlowConfig = SlowConfig()) -> Array:
    """Specialization of the manifold SDE with S = I (the SGD slow SDE)."""
    identity = DiagonalPreconditioner(np.ones(zeta.size))
    noise = rng.normal(size=zeta.size)
    for attempt in range(cfg.max_halvings + 1):
        h = dt / 2**attempt
        scale = np.sqrt(h / dt)
        dz = _sde_increment(problem, identity, zeta, h, noise * scale, cfg)
        retracted = _retract(problem, identity, zeta + dz, cfg)
        if retracted is not None:
            return retracted
    raise RetractionError(f"retraction failed after {cfg.max_halvings} halvings")


# --- implicit regularizers ---


@dataclass(frozen=True)
class RegularizerReport:
    name: str
    value: float
    gradient_on_gamma: Array
    residual_norm: float


_H_FLOOR = 1e-18  # zero-curvature coordinates contribute subgradient 0


def _diag_weights(kind: str, diag: Array, lam: float | None, eps: float | None,
                  alpha: float | None):
    """Value f(h) summed over the Hessian diagonal and its derivative weights."""
    if kind == "sgd_trh":
        return float(np.sum(diag)), np.ones_like(diag)
    if kind == "adam_sqrt":
        val = float(np.sum(np.sqrt(diag)))
        w = np.where(diag > _H_FLOOR, 0.5 / np.sqrt(np.maximum(diag, _H_FLOOR)), 0.0)
        return val, w
    if kind == "adame":
        if lam is None or not 0.0 <= lam < 1.0:
            raise ValueError(f"adame regularizer needs lam in [0, 1), got {lam}")
        val = float(np.sum(diag ** (1.0 - lam)))
        w = np.where(diag > _H_FLOOR,
                     (1.0 - lam) * np.maximum(diag, _H_FLOOR) ** (-lam), 0.0)
        return val, w
    if kind == "adam_eps":
        if eps is None or eps <= 0 or alpha is None or alpha <= 0:
            raise ValueError("adam_eps regularizer needs positive eps and alpha")
        root = np.sqrt(diag)
        ratio = np.sqrt(alpha) / eps
        val = float(np.sum(root - (eps / np.sqrt(alpha)) * np.log(ratio * root + 1.0)))
        w = np.sqrt(alpha) / (2.0 * (np.sqrt(alpha * diag) + eps))
        return val, w
    raise ValueError(f"unknown regularizer kind {kind!r}")


def regularizer(problem: Problem, zeta: Array, kind: str,
                lam: float | None = None, blocks=None, eps: float | None = None,
                alpha: float | None = None,
                cfg: SlowConfig = SlowConfig()) -> RegularizerReport:
    """Evaluate an implicit regularizer and its tangential gradient at zeta.

    Kinds: ``sgd_trh`` (tr H), ``adam_sqrt`` (tr Diag(H)^{1/2}), ``adame``
    (tr Diag(H)^{1-lam}), ``partitioned`` (sum_i sqrt(|B_i| tr H_{B_i})), and
    ``adam_eps`` (the eps > 0 correction of the Adam regularizer).

    The gradient is the exact semi-gradient grad3L[Diag(weights)] projected
    onto the tangent space with the orthogonal projector.
    """
    diag = problem.hessian_diag(zeta)
    if np.any(diag < -1e-10 * (1.0 + np.max(np.abs(diag)))):
        raise ValueError(f"negative Hessian diagonal beyond tolerance: {np.min(diag):.3e}")
    diag = np.clip(diag, 0.0, None)
    if kind == "partitioned":
        if blocks is None:
            raise ValueError("partitioned regularizer needs blocks")
        w = np.zeros_like(diag)
        val = 0.0
        for b in blocks:
            b = np.asarray(b, dtype=int)
            tr_b = float(np.sum(diag[b]))
            if tr_b < -1e-10:
                raise ValueError(f"negative block trace {tr_b:.3e}")
            val += np.sqrt(b.size * max(tr_b, 0.0))
            w[b] = np.sqrt(b.size) / (2.0 * np.sqrt(max(tr_b, _H_FLOOR))) \
                if tr_b > _H_FLOOR else 0.0
        name = "partitioned"
    else:
        val, w = _diag_weights(kind, diag, lam, eps, alpha)
        name = kind if lam is None else f"{kind}({lam:g})"
    grad_full = problem.third_dir(zeta, np.diag(w))
    identity = DiagonalPreconditioner(np.ones(zeta.size))
    p_orth = dphi_s_on_manifold(problem, identity, zeta, cfg.projection,
                                residual_tol=cfg.stage_residual_tol,
                                strict_split=False)
    grad_gamma = p_orth @ grad_full
    return RegularizerReport(name=name, value=val, gradient_on_gamma=grad_gamma,
                             residual_norm=float(np.linalg.norm(grad_gamma)))


def fixed_point_residual(problem: Problem, spec: AgmSpec, zeta: Array,
                         cfg: SlowConfig = SlowConfig()) -> float:
    """Norm of S* dPhi_{S*} S* grad3L[S*] at v* = V(alpha H), the slow-ODE
    stationarity condition."""
    v_star = equilibrium_v(problem, spec, zeta)
    s_prec = spec.smap(v_star)
    s_mat = s_prec.materialize()
    p_mat = _dphi_lax(problem, s_prec, zeta, cfg)
    r = s_mat @ (p_mat @ (s_mat @ problem.third_dir(zeta, s_mat)))
    return float(np.linalg.norm(r))


# --- slow-trajectory driver ---


@dataclass
class SlowTrajectory:
    times: Array
    zetas: Array  # (n_records, d)
    vs: Array
    columns: dict[str, Array]
    final_state: SlowState


def run_slow_ode(problem: Problem, spec: AgmSpec, state0: SlowState,
                 t_end: float, dt: float, cfg: SlowConfig = SlowConfig(),
                 record_times: Array | None = None,
                 metrics: dict | None = None,
                 stop_drift_norm: float | None = None,
                 adapt_move: float | None = None) -> SlowTrajectory:
    """Integrate the label-noise slow ODE to ``t_end`` (or stationarity).

    ``record_times`` defaults to 50 evenly spaced times; ``stop_drift_norm``
    ends the run early once |dzeta/dt| falls below it.  With ``adapt_move``
    set, the step grows as the drift dies so that each step moves roughly
    that far (capped so the v-relaxation at rate c stays resolved);
    stationarity runs then cost O(log) steps instead of O(t_end/dt).
    """
    if record_times is None:
        record_times = np.linspace(0.0, t_end, 51)[1:]
    record_times = np.asarray(sorted(record_times))
    metrics = metrics or {}
    state = state0
    times, zetas, vs = [], [], []
    cols: dict[str, list[float]] = {name: [] for name in metrics}

    def record(st: SlowState):
        times.append(st.t)
        zetas.append(st.zeta.copy())
        vs.append(st.v.copy())
        for name, fn in metrics.items():
            cols[name].append(float(fn(problem, st.zeta)))

    dt_cap = min(0.5, 1.0 / spec.c) if adapt_move else dt
    next_rec = 0
    prev_zeta, prev_drift, rate_est = None, None, 0.0
    while state.t < t_end - 1e-12:
        h = min(dt, t_end - state.t)
        if adapt_move is not None:
            drift, dv = _ode_rhs(problem, spec, state.zeta, state.v, cfg)
            dn = float(np.linalg.norm(drift))
            if stop_drift_norm is not None and \
                    max(dn, float(np.linalg.norm(dv))) <= stop_drift_norm:
                record(state)
                break
            if prev_zeta is not None:
                move = float(np.linalg.norm(state.zeta - prev_zeta))
                if move > 0:
                    rate_est = float(np.linalg.norm(drift - prev_drift)) / move
            prev_zeta, prev_drift = state.zeta.copy(), drift.copy()
            h = min(max(dt, adapt_move / max(dn, 1e-300)), dt_cap,
                    t_end - state.t)
            if rate_est > 0:
                h = min(h, 1.5 / rate_est)  # stay inside the RK4 stability region
        if next_rec < len(record_times):
            h = min(h, record_times[next_rec] - state.t)
        if h <= 1e-15:
            next_rec += 1
            continue
        state = slow_ode_step(problem, spec, state, h, cfg)
        while next_rec < len(record_times) and state.t >= record_times[next_rec] - 1e-12:
            record(state)
            next_rec += 1
        if stop_drift_norm is not None and adapt_move is None:
            dz, dv = _ode_rhs(problem, spec, state.zeta, state.v, cfg)
            if max(np.linalg.norm(dz), np.linalg.norm(dv)) <= stop_drift_norm:
                record(state)
                break
    if not times or times[-1] < state.t - 1e-12:
        record(state)
    return SlowTrajectory(times=np.array(times), zetas=np.array(zetas),
                          vs=np.array(vs),
                          columns={k: np.array(v) for k, v in cols.items()},
                          final_state=state)


# --- Shampoo drift field and curl diagnostics ---


def shampoo_field(problem: Problem, zeta: Array, eps: float = 1e-8) -> Array:
    """The drift field grad3L[S(V(Sigma))] with the Shampoo preconditioner."""
    if problem.matrix_shape is None:
        raise ValueError("Shampoo field needs a problem with a matrix parameter shape")
    d1, d2 = problem.matrix_shape
    if d1 * d2 != problem.dim:
        raise ValueError(f"matrix shape {problem.matrix_shape} does not match dim {problem.dim}")
    spec = make_shampoo((d1, d2), eta=1.0, c=1e-6, eps=eps)
    sigma = problem.noise_cov(zeta)
    s_mat = spec.smap(spec.vmat(sigma)).materialize()
    return problem.third_dir(zeta, s_mat)


def adam_field(problem: Problem, zeta: Array, eps: float = 1e-8) -> Array:
    """The corresponding Adam drift field (a gradient field when H is diagonal)."""
    sigma_diag = np.clip(np.diag(problem.noise_cov(zeta)), 0.0, None)
    s_mat = np.diag(1.0 / (np.sqrt(sigma_diag) + eps))
    return problem.third_dir(zeta, s_mat)


def curl_estimate(field_fn, zeta: Array, i: int, j: int, h: float) -> float:
    """Central-difference curl component dA_j/dz_i - dA_i/dz_j."""
    zeta = np.asarray(zeta, dtype=float)
    ei = np.zeros_like(zeta)
    ej = np.zeros_like(zeta)
    ei[i] = h
    ej[j] = h
    da_j = (field_fn(zeta + ei)[j] - field_fn(zeta - ei)[j]) / (2 * h)
    da_i = (field_fn(zeta + ej)[i] - field_fn(zeta - ej)[i]) / (2 * h)
    return float(da_j - da_i)


def curl_noise_floor(field_fn, zeta: Array, i: int, j: int, h: float) -> float:
    """Richardson-style estimate of the finite-difference error of curl_estimate."""
    c1 = curl_estimate(field_fn, zeta, i, j, h)
    c2 = curl_estimate(field_fn, zeta, i, j, h / 2.0)
    scale = float(np.max(np.abs(field_fn(zeta))))
    round_off = 32.0 * np.finfo(float).eps * scale / h
    return abs(c1 - c2) + round_off + 1e-14
