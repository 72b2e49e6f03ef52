"""Single-step maps and limit-map drivers for intersection retractions.

Every retraction here produces a point of M_r = M1 cap M2 by iterating a
cheap step map from V = x + eta:

 - apm_step: alternate the two exact projections (linear rate),
 - iap_step: replace the sphere projection by its linearization,
 - newton_slra_step: project onto M1 intersected with the tangent slice of
   M2 at the projected point (quadratic rate, Schur or Woodbury solve),
 - relaxed_newton_slra_step: same with the s slice constraints aggregated
   into one (scalar Schur system),
 - aphl_step: dissolve the affine block into a correction along the sphere
   tangents (iterates live on M2),
 - gwa_iterate / gwa_newton_iterate: dual ascent for the exact metric
   projection, wrapped by metric_project,
 - tapr: a three-phase hybrid (APM far out, iAP in a moderate neighborhood,
   NewtonSLRA near the set) with merit-decrease safeguards.

The retract() driver wraps any of these behind one config and records a
per-iteration trace (phase tag, residuals, step norm, wall time).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg as sla

from . import manifold as mf
from .errors import (
    DegenerateRow,
    InitialResidualTooLarge,
    IsectError,
    MaxIterExceeded,
    SingularGram,
    SingularSchur,
    VanishingDirection,
    ZeroNormal,
)

__all__ = [
    "RetractionKind",
    "RetractionConfig",
    "TaprParams",
    "IterTrace",
    "RetractionResult",
    "apm_step",
    "iap_step",
    "newton_slra_step",
    "relaxed_newton_slra_step",
    "aphl_step",
    "gwa_objective",
    "gwa_iterate",
    "gwa_newton_iterate",
    "metric_project",
    "retract",
    "tapr",
    "retract_tol",
]

_SCHUR_PATHS = ("auto", "direct", "smw")

# weight floor for the dual iteration; keeps A Diag(v) A^T bounded
_GWA_WEIGHT_FLOOR = 1e-12


class RetractionKind(Enum):
    APM = "apm"
    IAP = "iap"
    NewtonSLRA = "newton-slra"
    RelaxedNewtonSLRA = "relaxed-newton-slra"
    APHL = "aphl"
    MetricGWA = "metric-gwa"
    MetricGWANewton = "metric-gwa-newton"
    TAPR = "tapr"


@dataclass(frozen=True)
class TaprParams:
    """Thresholds and merit factors of the three-phase hybrid.

    a2 = None defers to tol * 10^3, resolved when the run starts (and
    clipped at a1 so the phase ordering stays meaningful). a1 == a2 is
    allowed: it degenerates the schedule to one iAP trial before the
    second-order phase.
    """

    a0: float = 1.0
    a1: float = 1e-2
    a2: float | None = None
    mu0: float = 0.05
    mu1: float = 0.1
    mu2: float = 0.3

    def __post_init__(self):
        if not self.a0 > 0.0:
            raise ValueError("a0 must be positive")
        if not 0.0 < self.a1 < 1.0:
            raise ValueError("a1 must satisfy 1 > a1 > 0")
        if self.a2 is not None and not 0.0 < self.a2 <= self.a1:
            raise ValueError("a2 must satisfy a1 >= a2 > 0")
        if not 0.0 < self.mu0 < self.mu1 <= self.mu2 < 1.0:
            raise ValueError("need 0 < mu0 < mu1 <= mu2 < 1")


@dataclass(frozen=True)
class RetractionConfig:
    kind: RetractionKind = RetractionKind.APM
    tol: float = 1e-9
    maxiter: int = 200
    schur_path: str = "auto"
    tapr: TaprParams | None = None
    # residual bound is tol * (||y||_F + 1) unless this flag makes it plain tol
    tol_absolute: bool = False

    def __post_init__(self):
        if not isinstance(self.kind, RetractionKind):
            raise ValueError("kind must be a RetractionKind")
        if not self.tol >= 1e-15:
            raise ValueError("tol must be >= 1e-15")
        if self.maxiter != int(self.maxiter) or self.maxiter < 1:
            raise ValueError("maxiter must be a positive integer")
        if self.schur_path not in _SCHUR_PATHS:
            raise ValueError(f"schur_path must be one of {_SCHUR_PATHS}")
        if self.tapr is not None and not isinstance(self.tapr, TaprParams):
            raise ValueError("tapr must be a TaprParams instance")


@dataclass
class IterTrace:
    """Parallel per-iteration records; entry 0 describes the start point."""

    phases: list = field(default_factory=list)
    combined: list = field(default_factory=list)
    binary: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def record(self, phase, combined, binary, step_norm, wall):
        self.phases.append(str(phase))
        self.combined.append(float(combined))
        self.binary.append(float(binary))
        self.step_norms.append(float(step_norm))
        self.wall_times.append(float(wall))

    def __len__(self):
        return len(self.phases)


@dataclass(frozen=True)
class RetractionResult:
    point: np.ndarray
    converged: bool
    trace: IterTrace
    kind: RetractionKind


def retract_tol(grad_norm: float, i: int) -> float:
    """Inexactness schedule for the retraction subproblem at outer step i."""
    return max(min(grad_norm / 100.0, 1.0 / i**3), 1e-9)


# ---------------------------------------------------------------------------
# single-step maps


def apm_step(M, R):
    """One alternating-projection sweep; the output sits on M1 exactly."""
    return mf.project_affine(M, mf.project_binary(M, R))


def iap_step(M, R):
    """Like apm_step with the sphere projection linearized at R."""
    return mf.project_affine(M, mf.linearized_project(M, R))


def _check_path(schur_path):
    if schur_path not in _SCHUR_PATHS:
        raise ValueError(f"schur_path must be one of {_SCHUR_PATHS}")


def _resolve_path(M, schur_path):
    if schur_path != "auto":
        return schur_path
    # crossover of the s^3 direct cost against the (m r)^3 Woodbury cost
    return "smw" if M.dims.s > 4 * M.dims.m_rows * M.dims.r else "direct"


def _slice_solve(M, C, rhs, schur_path):
    """Solve (I_s - (C C^T) o S) mu = rhs with S = A_B^T (A A^T)^{-1} A_B.

    The direct path forms the s x s system; the smw path uses
    mu = rhs + W (I - W^T W)^{-1} W^T rhs with W = [Diag(C[:,j]) U]_j,
    which only factors an (m r) x (m r) matrix.
    """
    U = M.affine.low_rank_factor  # s x m, S = U U^T
    path = _resolve_path(M, schur_path)
    if path == "direct":
        K = np.eye(C.shape[0]) - (C @ C.T) * (U @ U.T)
        try:
            return np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSchur(f"slice system singular: {exc}") from exc
    W = np.hstack([C[:, j : j + 1] * U for j in range(C.shape[1])])
    small = np.eye(W.shape[1]) - W.T @ W
    try:
        inner = np.linalg.solve(small, W.T @ rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSchur(f"woodbury core singular: {exc}") from exc
    return rhs + W @ inner


def newton_slra_step(M, R, schur_path="auto"):
    """Project R onto M1 intersected with the tangent slice of M2 at
    project_binary(R). Quadratically convergent near the intersection."""
    _check_path(schur_path)
    R = np.asarray(R, dtype=float)
    scale = np.linalg.norm(R) + 1.0
    if np.linalg.norm(mf.affine_residual(M, R)) > 1e-8 * scale:
        raise ValueError("newton_slra_step needs a base point on the affine set")
    Rt = mf.project_binary(M, R)
    B = M.binary_rows
    C = mf.row_normals(M, Rt)  # unit rows since Rt is on M2
    g = np.einsum("ij,ij->i", R[B] - Rt[B], C)
    mu = _slice_solve(M, C, g, schur_path)
    AB = M.affine.A[:, B]
    Lam = -M.affine.gram_solve(AB @ (mu[:, None] * C))
    return R - M.affine.A.T @ Lam - mf._embed_binary(M, mu, C)


def relaxed_newton_slra_step(M, R):
    """NewtonSLRA with the s slice constraints aggregated into the single
    constraint <D, X - Rt> = 0, D = R - Rt; its Schur system is 1x1."""
    R = np.asarray(R, dtype=float)
    Rt = mf.project_binary(M, R)
    D = R - Rt
    nD = np.linalg.norm(D)
    if nD < 1e-14:
        raise VanishingDirection(
            f"displacement norm {nD:.3e} below 1e-14; point already on M2"
        )
    A = M.affine.A
    E = mf.affine_residual(M, R)
    AD = A @ D
    q = float(np.vdot(AD, M.affine.gram_solve(AD)))
    d2 = float(np.vdot(D, D))
    denom = d2 - q
    if abs(denom) < 1e-14 * d2:
        raise SingularSchur("relaxed direction lies in the affine row space")
    mu = (d2 - float(np.vdot(AD, M.affine.gram_solve(E)))) / denom
    Lam = M.affine.gram_solve(E - mu * AD)
    return R - A.T @ Lam - mu * D


def aphl_step(M, R, schur_path="auto"):
    """Cancel the affine residual by a correction that is tangent to every
    row sphere, then re-project onto M2. Iterates stay on M2; the affine
    residual decays quadratically near the intersection."""
    _check_path(schur_path)
    R = np.asarray(R, dtype=float)
    A = M.affine.A
    B = M.binary_rows
    E = mf.affine_residual(M, R)
    C = mf.row_normals(M, R)
    AB = A[:, B]
    h = np.einsum("ij,ij->i", AB.T @ M.affine.gram_solve(E), C)
    mu = _slice_solve(M, C, h, schur_path)
    Lam = M.affine.gram_solve(E + AB @ (mu[:, None] * C))
    Rtil = R - A.T @ Lam + mf._embed_binary(M, mu, C)
    return mf.project_binary(M, Rtil)


# ---------------------------------------------------------------------------
# dual (metric-projection) iterations


def _gwa_weights(M, Y):
    v = np.full(M.dims.N, 2.0)
    nb = np.linalg.norm(Y[M.binary_rows], axis=1)
    v[M.binary_rows] = 1.0 / np.maximum(nb, _GWA_WEIGHT_FLOOR)
    return v


def gwa_objective(M, Vprime, gamma, Theta) -> float:
    """Dual objective sum_B ||Y_i|| + sum_notB ||Y_i||^2 + <gamma, Theta e1>."""
    Y = Vprime + M.affine.A.T @ Theta
    norms = np.linalg.norm(Y, axis=1)
    mask = np.zeros(M.dims.N, dtype=bool)
    mask[M.binary_rows] = True
    return float(norms[mask].sum() + (norms[~mask] ** 2).sum() + gamma @ Theta[:, 0])


def gwa_iterate(M, Vprime, gamma, Theta):
    """One weighted-least-squares (Weiszfeld) update of the dual variable."""
    A = M.affine.A
    Y = Vprime + A.T @ Theta
    v = _gwa_weights(M, Y)
    Gv = A @ (v[:, None] * A.T)
    rhs = A @ (v[:, None] * Vprime)
    rhs[:, 0] += gamma
    try:
        return -sla.solve(Gv, rhs, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise SingularGram(f"weighted Gram singular in dual update: {exc}") from exc


def gwa_newton_iterate(M, Vprime, gamma, Theta, schur_path="auto"):
    """Newton update for the dual objective. The Hessian is the weighted
    Gram minus a rank-s correction along the normalized binary rows."""
    _check_path(schur_path)
    A = M.affine.A
    B = M.binary_rows
    m, r, s = M.dims.m_rows, M.dims.r, M.dims.s
    Y = Vprime + A.T @ Theta
    nb = np.linalg.norm(Y[B], axis=1)
    if np.min(nb) < _GWA_WEIGHT_FLOOR:
        raise ValueError("a binary row of Y vanished; Newton system undefined")
    v = np.full(M.dims.N, 2.0)
    v[B] = 1.0 / nb
    Yhat = Y[B] / nb[:, None]
    grad = A @ (v[:, None] * Y)
    grad[:, 0] += gamma
    M0 = A @ (v[:, None] * A.T)
    AB = A[:, B]
    vB = v[B]
    path = _resolve_path(M, schur_path)
    if path == "direct":
        H = np.kron(M0, np.eye(r))
        for k in range(s):
            H -= vB[k] * np.kron(np.outer(AB[:, k], AB[:, k]), np.outer(Yhat[k], Yhat[k]))
        try:
            delta = np.linalg.solve(H, grad.ravel()).reshape(m, r)
        except np.linalg.LinAlgError as exc:
            raise SingularSchur(f"newton system singular: {exc}") from exc
        return Theta - delta
    try:
        cho = sla.cho_factor(M0, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSchur(f"weighted Gram not positive definite: {exc}") from exc
    T = AB.T @ sla.cho_solve(cho, AB)
    Z = AB.T @ sla.cho_solve(cho, grad)
    beta0 = np.einsum("ij,ij->i", Z, Yhat)
    K = (T * (Yhat @ Yhat.T)) * vB[None, :]
    try:
        beta = np.linalg.solve(np.eye(s) - K, beta0)
    except np.linalg.LinAlgError as exc:
        raise SingularSchur(f"newton schur system singular: {exc}") from exc
    delta = sla.cho_solve(cho, grad + AB @ ((vB * beta)[:, None] * Yhat))
    return Theta - delta


def metric_project(M, V, method="gwa", tol=1e-9, maxiter=500):
    """Exact metric projection of V onto M_r via its dual formulation.

    Runs the chosen dual iteration from Theta = 0 until the update is small
    and the dual objective did not increase, then recovers the primal point
    as project_binary(V + A^T Theta*).
    """
    if method not in ("gwa", "gwa-newton"):
        raise ValueError("method must be 'gwa' or 'gwa-newton'")
    if tol <= 0.0 or maxiter < 1:
        raise ValueError("tol must be positive and maxiter >= 1")
    V = np.asarray(V, dtype=float)
    A = M.affine.A
    Vp = V.copy()
    Vp[:, 0] -= 0.5
    gamma = A @ np.ones(M.dims.N) - 2.0 * M.affine.b_col
    step = gwa_iterate if method == "gwa" else gwa_newton_iterate
    Theta = np.zeros((M.dims.m_rows, M.dims.r))
    g_cur = gwa_objective(M, Vp, gamma, Theta)
    for _ in range(maxiter):
        nxt = step(M, Vp, gamma, Theta)
        g_nxt = gwa_objective(M, Vp, gamma, nxt)
        change = np.linalg.norm(nxt - Theta)
        done = change <= tol * (np.linalg.norm(Theta) + 1.0) and g_nxt <= g_cur + 1e-12 * (
            abs(g_cur) + 1.0
        )
        Theta, g_cur = nxt, g_nxt
        if done:
            return mf.project_binary(M, V + A.T @ Theta)
    raise MaxIterExceeded(f"dual iteration ({method}) did not settle in {maxiter} steps")


# ---------------------------------------------------------------------------
# drivers


def _step_with_retry(step, y, iteration):
    """Run one step; on a degenerate-row failure perturb the offending row
    by 1e-12 (deterministically seeded) and retry once. Any error escaping
    here carries the iteration index."""
    try:
        return step(y)
    except (DegenerateRow, ZeroNormal) as first:
        rng = np.random.default_rng(7_654_321 + iteration)
        bump = rng.standard_normal(y.shape[1])
        bump *= 1e-12 / np.linalg.norm(bump)
        bumped = np.array(y, dtype=float, copy=True)
        bumped[first.row] += bump
        try:
            return step(bumped)
        except IsectError as second:
            second.iteration = iteration
            raise
    except IsectError as err:
        err.iteration = iteration
        raise


def _validate_base_and_tangent(M, x, eta, base_tol=None):
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if x.shape != (M.dims.N, M.dims.r) or eta.shape != x.shape:
        raise ValueError("x and eta must both have shape (N, r)")
    allow = mf.FEASIBILITY_TOL if base_tol is None else float(base_tol)
    if mf.combined_residual(M, x) > allow * (np.linalg.norm(x) + 1.0):
        raise ValueError("base point x is not on the manifold within tolerance")
    esc = np.linalg.norm(eta) + 1.0
    if np.linalg.norm(M.affine.A @ eta) > 1e-8 * esc:
        raise ValueError("eta violates the linearized affine constraints")
    dots = np.einsum("ij,ij->i", mf.row_normals(M, x), eta[M.binary_rows])
    if dots.size and np.max(np.abs(dots)) > 1e-8 * esc:
        raise ValueError("eta violates the linearized row-sphere constraints")
    return x, eta


def _bound(tol, tol_absolute, Y):
    return tol if tol_absolute else tol * (np.linalg.norm(Y) + 1.0)


def _make_step(M, kind, schur_path):
    if kind is RetractionKind.APM:
        return lambda R: apm_step(M, R)
    if kind is RetractionKind.IAP:
        return lambda R: iap_step(M, R)
    if kind is RetractionKind.NewtonSLRA:
        return lambda R: newton_slra_step(M, R, schur_path=schur_path)
    if kind is RetractionKind.RelaxedNewtonSLRA:
        return lambda R: relaxed_newton_slra_step(M, R)
    if kind is RetractionKind.APHL:
        return lambda R: aphl_step(M, R, schur_path=schur_path)
    raise ValueError(f"no step map for kind {kind}")


_NEWTON_FAMILY = (
    RetractionKind.NewtonSLRA,
    RetractionKind.RelaxedNewtonSLRA,
    RetractionKind.APHL,
)


def retract(M, x, eta, cfg: RetractionConfig, base_tol=None) -> RetractionResult:
    """Retraction driver: iterate cfg.kind's step map from x + eta until the
    combined residual meets the bound. Raises MaxIterExceeded (carrying the
    partial result) when the budget runs out.

    base_tol widens the feasibility guard on x (relative, default
    FEASIBILITY_TOL) for callers whose base legitimately carries the
    residual of an earlier inexact retraction."""
    if not isinstance(cfg, RetractionConfig):
        raise TypeError("cfg must be a RetractionConfig")
    x, eta = _validate_base_and_tangent(M, x, eta, base_tol=base_tol)
    if cfg.kind is RetractionKind.TAPR:
        params = cfg.tapr if cfg.tapr is not None else TaprParams()
        return tapr(
            M, x, eta, params,
            tol=cfg.tol, maxiter=cfg.maxiter, tol_absolute=cfg.tol_absolute,
            base_tol=base_tol,
        )
    V = x + eta
    trace = IterTrace()
    res = mf.combined_residual(M, V)
    trace.record("init", res, np.linalg.norm(mf.binary_residual(M, V)), 0.0, 0.0)
    if res <= _bound(cfg.tol, cfg.tol_absolute, V):
        return RetractionResult(point=V, converged=True, trace=trace, kind=cfg.kind)

    if cfg.kind in (RetractionKind.MetricGWA, RetractionKind.MetricGWANewton):
        method = "gwa" if cfg.kind is RetractionKind.MetricGWA else "gwa-newton"
        t0 = time.perf_counter()
        # dual tolerance sits below the primal target so the recovered
        # point clears the residual bound
        point = metric_project(M, V, method=method, tol=cfg.tol * 1e-2, maxiter=cfg.maxiter)
        res = mf.combined_residual(M, point)
        trace.record(
            cfg.kind.value,
            res,
            np.linalg.norm(mf.binary_residual(M, point)),
            np.linalg.norm(point - V),
            time.perf_counter() - t0,
        )
        result = RetractionResult(
            point=point,
            converged=res <= _bound(cfg.tol, cfg.tol_absolute, point),
            trace=trace,
            kind=cfg.kind,
        )
        if not result.converged:
            raise MaxIterExceeded(
                "dual loop settled but the primal residual bound was missed",
                result=result,
            )
        return result

    step = _make_step(M, cfg.kind, cfg.schur_path)
    y = V
    if cfg.kind is RetractionKind.APHL:
        y = _step_with_retry(lambda R: mf.project_binary(M, R), V, 0)
        res = mf.combined_residual(M, y)
    for i in range(1, cfg.maxiter + 1):
        t0 = time.perf_counter()
        tag = cfg.kind.value
        try:
            y_new = _step_with_retry(step, y, i)
            res_new = mf.combined_residual(M, y_new)
        except VanishingDirection:
            if cfg.kind is not RetractionKind.RelaxedNewtonSLRA:
                raise
            y_new, res_new, tag = None, np.inf, "apm-fallback"
        if cfg.kind in _NEWTON_FAMILY and res_new > res:
            # the local guarantees failed; take one safe sweep instead
            y_new = _step_with_retry(lambda R: apm_step(M, R), y, i)
            res_new = mf.combined_residual(M, y_new)
            tag = "apm-fallback"
        trace.record(
            tag,
            res_new,
            np.linalg.norm(mf.binary_residual(M, y_new)),
            np.linalg.norm(y_new - y),
            time.perf_counter() - t0,
        )
        y, res = y_new, res_new
        if res <= _bound(cfg.tol, cfg.tol_absolute, y):
            return RetractionResult(point=y, converged=True, trace=trace, kind=cfg.kind)
    partial = RetractionResult(point=y, converged=False, trace=trace, kind=cfg.kind)
    raise MaxIterExceeded(
        f"retraction ({cfg.kind.value}) missed tol {cfg.tol:g} in {cfg.maxiter} iterations",
        result=partial,
    )


def tapr(
    M, x, eta, params: TaprParams, tol, maxiter, tol_absolute=False, base_tol=None
) -> RetractionResult:
    """Three-phase retraction: APM until err < a1, then iAP with a
    merit-decrease test, then NewtonSLRA once err <= a2 or an iAP probe
    stalls. Rejected trials keep the current point, fall back one phase,
    and still count against maxiter."""
    if not isinstance(params, TaprParams):
        raise TypeError("params must be a TaprParams")
    if tol < 1e-15 or maxiter < 1:
        raise ValueError("tol must be >= 1e-15 and maxiter >= 1")
    x, eta = _validate_base_and_tangent(M, x, eta, base_tol=base_tol)
    a2 = params.a2 if params.a2 is not None else min(params.a1, tol * 1e3)

    y = x + eta
    err = mf.combined_residual(M, y)
    if err > params.a0:
        raise InitialResidualTooLarge(err, params.a0)
    trace = IterTrace()
    trace.record("apm", err, np.linalg.norm(mf.binary_residual(M, y)), 0.0, 0.0)
    if err <= _bound(tol, tol_absolute, y):
        return RetractionResult(point=y, converged=True, trace=trace, kind=RetractionKind.TAPR)

    phase = "apm"
    i = 1
    while i <= maxiter and err > _bound(tol, tol_absolute, y):
        t0 = time.perf_counter()
        moved = 0.0
        if phase == "apm":
            y_new = _step_with_retry(lambda R: apm_step(M, R), y, i)
            moved = np.linalg.norm(y_new - y)
            y, err, tag = y_new, mf.combined_residual(M, y_new), "apm"
            if err < params.a1:
                phase = "iap"
        elif phase == "iap":
            probe = _step_with_retry(lambda R: iap_step(M, R), y, i)
            err_probe = mf.combined_residual(M, probe)
            err_pre = err
            if err_probe**2 <= (1.0 - params.mu1) * err_pre**2:
                moved = np.linalg.norm(probe - y)
                y, err, tag = probe, err_probe, "iap"
            else:
                tag, phase = "iap-reject", "apm"
            slow = err_probe**2 > (1.0 - params.mu0) * err_pre**2
            if err <= a2 or slow:
                phase = "newton"
        else:
            probe = _step_with_retry(lambda R: newton_slra_step(M, R), y, i)
            err_probe = mf.combined_residual(M, probe)
            if err_probe**2 <= (1.0 - params.mu2) * err**2:
                moved = np.linalg.norm(probe - y)
                y, err, tag = probe, err_probe, "newton"
            else:
                tag, phase = "newton-reject", "iap"
        trace.record(
            tag, err, np.linalg.norm(mf.binary_residual(M, y)), moved,
            time.perf_counter() - t0,
        )
        i += 1
    if err <= _bound(tol, tol_absolute, y):
        return RetractionResult(point=y, converged=True, trace=trace, kind=RetractionKind.TAPR)
    partial = RetractionResult(point=y, converged=False, trace=trace, kind=RetractionKind.TAPR)
    raise MaxIterExceeded(
        f"three-phase retraction missed tol {tol:g} in {maxiter} trials",
        result=partial,
    )
