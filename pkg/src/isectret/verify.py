"""Numerical certification of the geometric properties behind the retractions.

Three instruments:

* ``sphere_expansion_check`` compares the exact metric projection onto the
  unit sphere against its second-order expansion, whose curvature terms have
  closed forms there: II_x(u_T, u_T) = -||u_T||^2 x and
  W_x(u_T, u_N) = -<u, x> u_T. The sphere is the one embedded set where every
  term of the expansion can be written down, which makes it the reference
  oracle for the projection expansion used everywhere else.

* ``order_slope`` measures retraction order on an intersection manifold: for
  a shrinking tangent step t * eta it records the total retraction error
  ||R(x, t eta) - (x + t eta)|| and its tangent-space component, then fits
  log-log slopes. Second-order retractions show total slope 2 (the curvature
  term) and tangential slope 3.

* ``rate_fit`` estimates linear contraction factors and quadratic-convergence
  constants from residual traces.

Slope runs drive the inner retractions at a fixed absolute tolerance of 1e-12
rather than the adaptive schedule, so the measured error reflects geometry
instead of solver truncation. Points below plateau_floor = 1e-13 (||x||_F + 1)
are excluded from fits as roundoff plateau; a fit needs at least 4 surviving
points, otherwise InsufficientTail is raised.
"""

from dataclasses import dataclass

import numpy as np

from . import manifold as mf
from . import solvers as sv
from .errors import InsufficientTail, IsectError, NearZeroInput

__all__ = [
    "SlopeFit",
    "RateFit",
    "SphereExpansion",
    "sphere_project",
    "sphere_expansion_check",
    "order_slope",
    "rate_fit",
    "default_t_grid",
]

# fit plumbing; see module docstring
_PLATEAU_COEFF = 1e-13
_TAIL_FLOOR = 1e-13
_MIN_FIT_POINTS = 4
_SLOPE_TOL = 1e-12
_SLOPE_MAXITER = 400_000
_RATE_MODES = ("linear", "quadratic")


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares slope of log10(error) against log10(t), with the grid,
    the raw errors, and the plateau floor used to exclude roundoff points."""

    t_values: np.ndarray
    errors: np.ndarray
    slope: float
    plateau_floor: float

    def __post_init__(self):
        t = np.asarray(self.t_values, dtype=float)
        e = np.asarray(self.errors, dtype=float)
        if t.ndim != 1 or e.shape != t.shape:
            raise ValueError("t_values and errors must be 1-d of equal length")
        if t.size and not np.all(np.diff(t) > 0):
            raise ValueError("t_values must be strictly increasing")
        if np.any(e < 0):
            raise ValueError("errors must be nonnegative")
        if not np.isfinite(self.slope):
            raise ValueError("slope must be finite")
        object.__setattr__(self, "t_values", t)
        object.__setattr__(self, "errors", e)

    @property
    def plateau_excluded_count(self) -> int:
        return int(np.sum(self.errors <= self.plateau_floor))


@dataclass(frozen=True)
class RateFit:
    """Contraction estimates from a residual tail.

    linear_factor is the geometric mean of the last-5 successive ratios;
    quadratic_constant the geometric mean of r_{k+1} / r_k^2 over the tail.
    max_ratio (linear mode) and quadratic_spread (quadratic mode, max/min of
    the constant estimates) qualify the headline numbers.
    """

    residuals: np.ndarray
    linear_factor: float
    quadratic_constant: float
    max_ratio: float | None = None
    quadratic_spread: float | None = None

    def __post_init__(self):
        res = np.asarray(self.residuals, dtype=float)
        if np.any(res < 0):
            raise ValueError("residuals must be nonnegative")
        if not (np.isfinite(self.linear_factor) and np.isfinite(self.quadratic_constant)):
            raise ValueError("rate estimates must be finite")
        object.__setattr__(self, "residuals", res)


@dataclass(frozen=True)
class SphereExpansion:
    """Residuals of the second-order projection expansion on the unit sphere."""

    base: np.ndarray
    perturbation: np.ndarray
    tangential_residual: float
    normal_residual_gap: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.base) - 1.0) > 1e-12:
            raise ValueError("base point must lie on the unit sphere")


def default_t_grid() -> np.ndarray:
    """15 logarithmically spaced step scales in [1e-7, 1e-5]."""
    return np.logspace(-7.0, -5.0, 15)


def sphere_project(x: np.ndarray) -> np.ndarray:
    """Metric projection of a nonzero vector onto the unit sphere."""
    x = np.asarray(x, dtype=float)
    nrm = float(np.linalg.norm(x))
    if nrm <= 1e-14:
        raise NearZeroInput(f"cannot project a vector of norm {nrm:.3e}")
    return x / nrm


def sphere_expansion_check(x: np.ndarray, u: np.ndarray) -> SphereExpansion:
    """Compares P(x + u) on the unit sphere with its second-order expansion.

    The expansion is x + u_T + W_x(u_T, u_N) + (1/2) II_x(u_T, u_T) with
    u_T = u - <u, x> x and u_N = <u, x> x. tangential_residual is the norm of
    the tangent-space part of the difference, normal_residual_gap the norm of
    the radial part; both are o(||u||^2) when the expansion is correct, and
    exactly zero for radial u because the projection is constant along fibers.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != u.shape:
        raise ValueError("base and perturbation shapes disagree")
    if abs(np.linalg.norm(x) - 1.0) > 1e-12:
        raise ValueError("base point must lie on the unit sphere")
    if np.linalg.norm(u) > 0.1:
        raise ValueError("perturbation exceeds the expansion window 0.1")

    a = float(u @ x)
    u_t = u - a * x
    # W term: -<u, x> u_T ; curvature term: -(1/2) ||u_T||^2 x
    model = x + u_t - a * u_t - 0.5 * float(u_t @ u_t) * x
    diff = sphere_project(x + u) - model
    radial = float(diff @ x)
    tangential = diff - radial * x
    return SphereExpansion(
        base=x,
        perturbation=u,
        tangential_residual=float(np.linalg.norm(tangential)),
        normal_residual_gap=abs(radial),
    )


def _fit_slope(t_grid: np.ndarray, errors: np.ndarray, floor: float, label: str) -> SlopeFit:
    keep = errors > floor
    kept = int(keep.sum())
    if kept < _MIN_FIT_POINTS:
        raise InsufficientTail(
            f"{label}: {kept} of {errors.size} points above the plateau floor "
            f"{floor:.3e}; need {_MIN_FIT_POINTS}"
        )
    slope = np.polyfit(np.log10(t_grid[keep]), np.log10(errors[keep]), 1)[0]
    return SlopeFit(
        t_values=t_grid, errors=errors, slope=float(slope), plateau_floor=floor
    )


def order_slope(M, kind, x, eta, t_grid=None):
    """Retraction-order measurement: returns (total, tangential) SlopeFits.

    For each t the retraction is driven to the fixed absolute tolerance 1e-12
    and the error against the tangent ray x + t eta is decomposed. Evaluation
    order is the grid order; repeated runs are bit-identical. A retraction
    failure is re-raised with the offending t on the exception's t_value.
    """
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0:
        raise ValueError("t_grid must be a nonempty 1-d array")
    if not np.all(np.diff(t_grid) > 0):
        raise ValueError("t_grid must be strictly increasing")
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)

    cfg = sv.RetractionConfig(
        kind=kind, tol=_SLOPE_TOL, maxiter=_SLOPE_MAXITER, tol_absolute=True
    )
    floor = _PLATEAU_COEFF * (np.linalg.norm(x) + 1.0)
    total = np.empty(t_grid.size)
    tangential = np.empty(t_grid.size)
    for j, t in enumerate(t_grid):
        try:
            out = sv.retract(M, x, t * eta, cfg)
        except IsectError as err:
            err.t_value = float(t)
            raise
        e = out.point - (x + t * eta)
        total[j] = np.linalg.norm(e)
        tangential[j] = np.linalg.norm(mf.project_tangent(M, x, e).xi)
    return (
        _fit_slope(t_grid, total, floor, "total error"),
        _fit_slope(t_grid, tangential, floor, "tangential error"),
    )


def rate_fit(trace, mode: str) -> RateFit:
    """Linear/quadratic rate estimates from a residual sequence.

    Accepts an IterTrace (its combined-residual log is used) or a bare
    residual sequence. The tail is the subsequence above 1e-13; at least 4
    tail points are required.
    """
    if mode not in _RATE_MODES:
        raise ValueError(f"mode must be one of {_RATE_MODES}, got {mode!r}")
    if isinstance(trace, sv.IterTrace):
        res = np.asarray(trace.combined, dtype=float)
    else:
        res = np.asarray(trace, dtype=float)
    if res.ndim != 1:
        raise ValueError("residual sequence must be 1-d")
    if np.any(res < 0):
        raise ValueError("residuals must be nonnegative")

    tail = res[res > _TAIL_FLOOR]
    if tail.size < _MIN_FIT_POINTS:
        raise InsufficientTail(
            f"{tail.size} residuals above {_TAIL_FLOOR:.0e}; need {_MIN_FIT_POINTS}"
        )
    ratios = tail[1:] / tail[:-1]
    last = ratios[-5:]
    linear_factor = float(np.exp(np.mean(np.log(last))))
    consts = tail[1:] / tail[:-1] ** 2
    quadratic_constant = float(np.exp(np.mean(np.log(consts))))
    if mode == "linear":
        return RateFit(
            residuals=res,
            linear_factor=linear_factor,
            quadratic_constant=quadratic_constant,
            max_ratio=float(np.max(last)),
        )
    return RateFit(
        residuals=res,
        linear_factor=linear_factor,
        quadratic_constant=quadratic_constant,
        quadratic_spread=float(np.max(consts) / np.min(consts)),
    )
