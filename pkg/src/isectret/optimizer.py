"""Riemannian gradient descent with BB stepsizes on the lifted quadratic.

The loop minimizes trace(R^T Q' R) + 2 c'^T R e1 over the intersection
manifold by retracting along the negative projected gradient. Any
retraction kind plugs in unchanged; the driver only varies the per-step
tolerance through the inexactness schedule. A nonmonotone backtracking
test keeps the unbounded BB proposals from running away on indefinite
quadratics.

Practical notes for callers:

- The constructive rank-one starts are first-order stationary for any
  objective supported on the binary block (the sphere-row normals there
  reduce to +-e1, so the tangent space annihilates exactly the rows and
  column the gradient lives in); the loop stops immediately from them.
  Pass a moved start R0 to descend.
- Iterates carry feasibility error up to the schedule tolerance, and the
  restoration part of the next step perturbs the objective at first order
  in that error, independently of the trial step. Gradient targets far
  below ~1e-2 on generic instances therefore starve the nonmonotone test
  (LineSearchFailed) rather than converge; this loop is a comparison
  harness, not a high-accuracy solver.
- A non-positive BB curvature estimate falls back to step_bounds.min and
  the loop may crawl at that step until max_outer; the per-iteration log
  shows such stalls plainly.
- The three-phase retraction guards its validity region and the metric
  dual Newton is undamped; both want step_bounds capped (e.g. max 5e-2)
  when used inside this loop, or their guard errors will surface.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from . import manifold as mf
from . import problems as pb
from . import solvers as sv
from .errors import IsectError, LineSearchFailed

__all__ = [
    "IterRecord",
    "OptimizerConfig",
    "SolveReport",
    "bb_step",
    "gradient",
    "objective",
    "solve",
]

_BB_VARIANTS = ("bb1", "bb2", "alternating")
_DECREASE_COEFF = 1e-8
_MAX_HALVINGS = 20
_FIRST_STEP_COEFF = 1e-3
_DEFAULT_STEP_BOUNDS = (1e-8, 1e2)


@dataclass(frozen=True)
class OptimizerConfig:
    retraction: sv.RetractionConfig
    grad_tol: float = 1e-6
    max_outer: int = 1000
    bb_variant: str = "bb1"
    step_bounds: tuple = _DEFAULT_STEP_BOUNDS
    nonmonotone_window: int = 5

    def __post_init__(self):
        if not isinstance(self.retraction, sv.RetractionConfig):
            raise ValueError("retraction must be a RetractionConfig")
        if not self.grad_tol > 0.0:
            raise ValueError("grad_tol must be positive")
        if self.max_outer != int(self.max_outer) or self.max_outer < 1:
            raise ValueError("max_outer must be a positive integer")
        if self.bb_variant not in _BB_VARIANTS:
            raise ValueError(f"bb_variant must be one of {_BB_VARIANTS}")
        lo, hi = self.step_bounds
        if not 0.0 < lo <= hi:
            raise ValueError("step_bounds must satisfy 0 < min <= max")
        w = self.nonmonotone_window
        if w != int(w) or w < 1:
            raise ValueError("nonmonotone_window must be an integer >= 1")


@dataclass(frozen=True)
class IterRecord:
    """One accepted outer iteration; record 0 describes the start point."""

    iteration: int
    objective: float
    grad_norm: float
    step: float
    halvings: int
    retraction_iters: int
    retraction_tol: float
    residual: float
    residual_bound: float


@dataclass(frozen=True)
class SolveReport:
    final_point: np.ndarray
    final_objective: float
    grad_norm: float
    outer_iters: int
    total_retraction_iters: int
    mean_retraction_iters: float
    wall_time: float
    per_iter_log: list


def objective(inst: pb.ProblemInstance, R: np.ndarray) -> float:
    """trace(R^T Q' R) + 2 c'^T R e1 on the lifted data."""
    QR = inst.Qlift @ R
    return float(np.sum(R * QR) + 2.0 * inst.clift @ R[:, 0])


def gradient(inst: pb.ProblemInstance, R: np.ndarray) -> np.ndarray:
    """Euclidean gradient 2 Q' R + 2 c' e1^T."""
    G = 2.0 * (inst.Qlift @ R)
    G[:, 0] += 2.0 * inst.clift
    return G


def bb_step(s_prev, y_prev, variant, k=0, step_bounds=_DEFAULT_STEP_BOUNDS):
    """Barzilai-Borwein stepsize from the last displacement pair.

    bb1 returns <s,s>/<s,y>, bb2 returns <s,y>/<y,y>; alternating picks
    bb1 on even k and bb2 on odd k. The result is clamped to step_bounds,
    and any non-positive or undefined ratio falls back to the lower bound.
    """
    if variant not in _BB_VARIANTS:
        raise ValueError(f"variant must be one of {_BB_VARIANTS}")
    s = np.asarray(s_prev, dtype=float)
    y = np.asarray(y_prev, dtype=float)
    ss = float(np.sum(s * s))
    sy = float(np.sum(s * y))
    yy = float(np.sum(y * y))
    if ss == 0.0 or yy == 0.0:
        raise ValueError("bb_step needs nonzero s_prev and y_prev")
    lo, hi = step_bounds
    use_bb1 = variant == "bb1" or (variant == "alternating" and k % 2 == 0)
    if use_bb1:
        raw = ss / sy if sy != 0.0 else -1.0
    else:
        raw = sy / yy
    if not np.isfinite(raw) or raw <= 0.0:
        return float(lo)
    return float(min(max(raw, lo), hi))


def _riemannian_grad(M, R, G, base_tol=None):
    xi = mf.project_tangent(M, R, G, base_tol=base_tol).xi
    return xi, float(np.linalg.norm(xi))


def _base_slack(res, R):
    # an iterate accepted at schedule tolerance tol_i carries residual up
    # to tol_i * scale; widen the geometry guards to exactly that much
    return max(mf.FEASIBILITY_TOL, 1.1 * res / (np.linalg.norm(R) + 1.0))


def _check_start(M, r, R0):
    if r != M.dims.r:
        raise ValueError(f"requested r={r}, but the manifold has r={M.dims.r}")
    R = np.array(R0, dtype=float)
    if R.shape != (M.dims.N, r):
        raise ValueError(f"start point must have shape ({M.dims.N}, {r})")
    res = mf.combined_residual(M, R)
    if res > 1e-8:
        raise ValueError(f"start point violates the constraints by {res:.3e}")
    return R


def solve(
    inst: pb.ProblemInstance, r: int, cfg: OptimizerConfig, R0=None
) -> SolveReport:
    """Run the BB gradient loop from a feasible start.

    The default start is the constructive feasible point. Note that the
    rank-one binary embeddings are first-order stationary for objectives
    supported on the binary block (the row normals there reduce to +-e1,
    so the tangent space annihilates exactly the gradient's support), in
    which case the loop stops immediately; pass a moved start R0 to
    actually descend.

    Stops when the Riemannian gradient norm reaches cfg.grad_tol or after
    cfg.max_outer accepted iterations. Raises LineSearchFailed when the
    nonmonotone test rejects 20 halvings in a row; retraction errors
    propagate with the outer iteration attached.
    """
    if not isinstance(cfg, OptimizerConfig):
        raise TypeError("cfg must be an OptimizerConfig")
    wall_start = time.perf_counter()
    M = inst.manifold
    R = pb.feasible_init(inst, r) if R0 is None else _check_start(M, r, R0)
    f = objective(inst, R)
    res = float(mf.combined_residual(M, R))
    slack = _base_slack(res, R)
    xi, g = _riemannian_grad(M, R, gradient(inst, R), base_tol=slack)
    log = [
        IterRecord(
            iteration=0,
            objective=f,
            grad_norm=g,
            step=0.0,
            halvings=0,
            retraction_iters=0,
            retraction_tol=0.0,
            residual=res,
            residual_bound=0.0,
        )
    ]
    objs = [f]
    s_prev = None
    y_prev = None
    outer = 0
    total_inner = 0

    for i in range(1, cfg.max_outer + 1):
        if g <= cfg.grad_tol:
            break
        if i == 1:
            t = _FIRST_STEP_COEFF / (g + 1.0)
        else:
            t = bb_step(s_prev, y_prev, cfg.bb_variant, k=i, step_bounds=cfg.step_bounds)
        tol_i = sv.retract_tol(g, i)
        ret_cfg = replace(cfg.retraction, tol=tol_i)
        window_max = max(objs[-cfg.nonmonotone_window :])
        inner_this = 0
        accepted = False
        for halvings in range(_MAX_HALVINGS + 1):
            target = R - t * xi
            try:
                out = sv.retract(M, R, -t * xi, ret_cfg, base_tol=slack)
            except IsectError as err:
                err.outer_iteration = i
                raise
            inner_this += max(len(out.trace) - 1, 0)
            f_new = objective(inst, out.point)
            if f_new <= window_max - _DECREASE_COEFF * t * g * g:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            raise LineSearchFailed(
                f"nonmonotone test rejected {_MAX_HALVINGS} halvings "
                f"at outer iteration {i}"
            )
        bound = tol_i if ret_cfg.tol_absolute else tol_i * (np.linalg.norm(target) + 1.0)
        R_new = out.point
        res = float(mf.combined_residual(M, R_new))
        slack = _base_slack(res, R_new)
        xi_new, g_new = _riemannian_grad(M, R_new, gradient(inst, R_new), base_tol=slack)
        s_prev = R_new - R
        y_prev = xi_new - xi
        R, f, xi, g = R_new, f_new, xi_new, g_new
        objs.append(f)
        outer = i
        total_inner += inner_this
        log.append(
            IterRecord(
                iteration=i,
                objective=f,
                grad_norm=g,
                step=t,
                halvings=halvings,
                retraction_iters=inner_this,
                retraction_tol=tol_i,
                residual=res,
                residual_bound=float(bound),
            )
        )

    mean = total_inner / outer if outer > 0 else 0.0
    return SolveReport(
        final_point=R,
        final_objective=f,
        grad_norm=g,
        outer_iters=outer,
        total_retraction_iters=total_inner,
        mean_retraction_iters=mean,
        wall_time=time.perf_counter() - wall_start,
        per_iter_log=log,
    )
