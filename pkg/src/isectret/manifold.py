"""Geometry of the intersection manifold M_r = M1 ∩ M2.

M1 is the affine set {R in R^(N x r) : A R = b e1^T} and M2 the row-sphere
set {R : ||R_i||^2 = R_{i,1} for i in B}. Each binary-indexed row of M2
lives on a sphere of radius 1/2 centered at e1^T/2, which gives closed-form
projections onto both factors. Everything here is a pure function of its
inputs; the manifold object itself is immutable after construction and can
be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import (
    DegenerateRow,
    NonProjector,
    SingularGram,
    TangentSolveSingular,
    ZeroNormal,
)

__all__ = [
    "ProblemDims",
    "AffineSystem",
    "IntersectionManifold",
    "TangentVector",
    "ConstraintResidual",
    "binary_residual",
    "affine_residual",
    "residual",
    "combined_residual",
    "project_affine",
    "project_binary",
    "row_normals",
    "project_tangent",
    "linearized_project",
    "angle_cosine",
    "point_scale",
    "FEASIBILITY_TOL",
]

# default "point is on the manifold" tolerance, relative to ||R||_F + 1
FEASIBILITY_TOL = 1e-6

# rows whose normal 2 R_i - e1^T is shorter than this have no well-defined
# sphere projection / linearization
_DEGENERATE_TOL = 1e-14

# dense KKT solve for the tangent projection up to this many binary rows
_DENSE_KKT_MAX_S = 64


@dataclass(frozen=True)
class ProblemDims:
    N: int
    r: int
    m_rows: int
    s: int

    def __post_init__(self):
        if self.N < 1 or self.r < 1:
            raise ValueError(f"need N >= 1 and r >= 1, got N={self.N}, r={self.r}")
        if not 1 <= self.s <= self.N:
            raise ValueError(f"need 1 <= s <= N, got s={self.s}, N={self.N}")
        if not 1 <= self.m_rows < self.N:
            raise ValueError(f"need 1 <= m_rows < N, got m_rows={self.m_rows}")


class AffineSystem:
    """The affine factor A R = b e1^T with its cached Gram factorization.

    gram_solve applies (A A^T)^{-1}; low_rank_factor is U with
    A_B^T (A A^T)^{-1} A_B = U U^T, reused by the Schur-complement solvers.
    """

    def __init__(self, A: np.ndarray, b_col: np.ndarray, binary_cols: np.ndarray):
        A = np.array(A, dtype=float)
        b_col = np.array(b_col, dtype=float)
        if A.ndim != 2 or b_col.shape != (A.shape[0],):
            raise ValueError(f"A is {A.shape}, b_col is {b_col.shape}; need (m, N) and (m,)")
        self.A = A
        self.b_col = b_col
        G = A @ A.T
        w = np.linalg.eigvalsh(G)
        if w[0] <= 1e-12 * max(w[-1], 1e-300):
            raise SingularGram(
                f"A A^T has eigenvalue ratio {w[0]:.3e}/{w[-1]:.3e}; affine rows are rank deficient"
            )
        self._cho = cho_factor(G, lower=True)
        # U = (L^{-1} A_B)^T so that U U^T = A_B^T (A A^T)^{-1} A_B
        L = np.tril(self._cho[0])
        self.low_rank_factor = solve_triangular(L, A[:, binary_cols], lower=True).T

    def gram_solve(self, Y: np.ndarray) -> np.ndarray:
        return cho_solve(self._cho, Y)


class IntersectionManifold:
    def __init__(self, A, b_col, binary_rows, r: int):
        binary_rows = np.asarray(binary_rows, dtype=np.intp)
        A = np.asarray(A, dtype=float)
        if binary_rows.ndim != 1 or binary_rows.size == 0:
            raise ValueError("binary_rows must be a non-empty 1-d index set")
        if np.any(np.diff(binary_rows) <= 0):
            raise ValueError("binary_rows must be strictly increasing")
        if binary_rows[0] < 0 or binary_rows[-1] >= A.shape[1]:
            raise ValueError(f"binary_rows out of bounds for N={A.shape[1]}")
        self.dims = ProblemDims(N=A.shape[1], r=int(r), m_rows=A.shape[0], s=binary_rows.size)
        self.binary_rows = binary_rows
        self.affine = AffineSystem(A, b_col, binary_rows)
        self.binary_rows.setflags(write=False)
        self.affine.A.setflags(write=False)

    def __repr__(self):
        d = self.dims
        return f"IntersectionManifold(N={d.N}, r={d.r}, m_rows={d.m_rows}, s={d.s})"


@dataclass(frozen=True)
class TangentVector:
    xi: np.ndarray
    base: np.ndarray


@dataclass(frozen=True)
class ConstraintResidual:
    affine_block: np.ndarray
    binary_block: np.ndarray
    combined_norm: float = field(init=False)

    def __post_init__(self):
        c = float(np.sqrt(np.linalg.norm(self.affine_block) ** 2 + np.linalg.norm(self.binary_block) ** 2))
        object.__setattr__(self, "combined_norm", c)


def point_scale(R: np.ndarray) -> float:
    return float(np.linalg.norm(R)) + 1.0


def _check_dims(M: IntersectionManifold, R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (M.dims.N, M.dims.r):
        raise ValueError(f"point has shape {R.shape}, manifold expects {(M.dims.N, M.dims.r)}")
    return R


def binary_residual(M: IntersectionManifold, R: np.ndarray) -> np.ndarray:
    """Per-row violations h_i = ||R_i||^2 - R_{i,1} over the binary rows."""
    R = _check_dims(M, R)
    RB = R[M.binary_rows]
    return np.einsum("ij,ij->i", RB, RB) - RB[:, 0]


def affine_residual(M: IntersectionManifold, R: np.ndarray) -> np.ndarray:
    R = _check_dims(M, R)
    out = M.affine.A @ R
    out[:, 0] -= M.affine.b_col
    return out


def residual(M: IntersectionManifold, R: np.ndarray) -> ConstraintResidual:
    return ConstraintResidual(affine_residual(M, R), binary_residual(M, R))


def combined_residual(M: IntersectionManifold, R: np.ndarray) -> float:
    return residual(M, R).combined_norm


def project_affine(M: IntersectionManifold, R: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto the affine factor, R - A^T (A A^T)^{-1} (A R - b e1^T)."""
    E = affine_residual(M, R)
    return np.asarray(R, dtype=float) - M.affine.A.T @ M.affine.gram_solve(E)


def row_normals(M: IntersectionManifold, R: np.ndarray) -> np.ndarray:
    """Rows c_i = 2 R_i - e1^T for i in B. On M2 these have unit norm."""
    R = _check_dims(M, R)
    C = 2.0 * R[M.binary_rows]
    C[:, 0] -= 1.0
    return C


def project_binary(M: IntersectionManifold, R: np.ndarray) -> np.ndarray:
    """Row-wise projection onto the sphere factor; rows outside B pass through."""
    R = _check_dims(M, R)
    C = row_normals(M, R)
    nrm = np.linalg.norm(C, axis=1)
    bad = np.flatnonzero(nrm < _DEGENERATE_TOL)
    if bad.size:
        raise DegenerateRow(int(M.binary_rows[bad[0]]))
    out = R.copy()
    rows = 0.5 * (C / nrm[:, None])
    rows[:, 0] += 0.5
    out[M.binary_rows] = rows
    return out


def linearized_project(M: IntersectionManifold, R: np.ndarray) -> np.ndarray:
    """Projection onto the first-order model of the row constraints at R:
    each binary row moves by -(h_i/||c_i||^2) c_i. Agrees with project_binary
    to second order in the distance to M2."""
    R = _check_dims(M, R)
    C = row_normals(M, R)
    nrm2 = np.einsum("ij,ij->i", C, C)
    bad = np.flatnonzero(np.sqrt(nrm2) < _DEGENERATE_TOL)
    if bad.size:
        i = int(M.binary_rows[bad[0]])
        raise ZeroNormal(i, float(np.sqrt(nrm2[bad[0]])))
    h = binary_residual(M, R)
    out = R.copy()
    out[M.binary_rows] -= (h / nrm2)[:, None] * C
    return out


def _embed_binary(M: IntersectionManifold, mu: np.ndarray, C: np.ndarray) -> np.ndarray:
    """T_B*(mu): rows indexed by B are mu_i c_i, all other rows zero."""
    out = np.zeros((M.dims.N, M.dims.r))
    out[M.binary_rows] = mu[:, None] * C
    return out


def project_tangent(
    M: IntersectionManifold,
    R: np.ndarray,
    v: np.ndarray,
    force_path: str | None = None,
    base_tol: float | None = None,
) -> TangentVector:
    """Orthogonal projection of v onto {xi : A xi = 0, <c_i, xi_i> = 0 for i in B}.

    Solves the KKT system in the multipliers (Lambda, mu). Small instances
    (s <= 64) assemble it densely; larger ones eliminate Lambda first and
    solve the s x s Schur complement, switching to the Woodbury identity when
    s dominates m*r.

    base_tol widens the feasibility guard on R (relative, default
    FEASIBILITY_TOL): inexact outer loops legitimately anchor at points
    whose residual matches their own tolerance schedule.
    """
    R = _check_dims(M, R)
    v = _check_dims(M, v)
    allow = FEASIBILITY_TOL if base_tol is None else float(base_tol)
    res = residual(M, R)
    if res.combined_norm > allow * point_scale(R):
        raise ValueError(
            f"base point infeasible: combined residual {res.combined_norm:.3e} "
            f"exceeds {allow:.0e} * scale"
        )
    A = M.affine.A
    m, r, s = M.dims.m_rows, M.dims.r, M.dims.s
    C = row_normals(M, R)
    Av = A @ v
    gv = np.einsum("ij,ij->i", C, v[M.binary_rows])
    d2 = np.einsum("ij,ij->i", C, C)

    path = force_path or ("dense" if s <= _DENSE_KKT_MAX_S else "schur")
    try:
        if path == "dense":
            G = A @ A.T
            K = np.zeros((m * r + s, m * r + s))
            K[: m * r, : m * r] = np.kron(G, np.eye(r))
            P = np.empty((m * r, s))
            for k, i in enumerate(M.binary_rows):
                P[:, k] = np.outer(A[:, i], C[k]).ravel()
            K[: m * r, m * r :] = P
            K[m * r :, : m * r] = P.T
            K[m * r :, m * r :] = np.diag(d2)
            rhs = np.concatenate([Av.ravel(), gv])
            sol = np.linalg.solve(K, rhs)
            Lam = sol[: m * r].reshape(m, r)
            mu = sol[m * r :]
        elif path == "schur":
            U = M.affine.low_rank_factor
            q = np.einsum("ij,ij->i", A[:, M.binary_rows].T @ M.affine.gram_solve(Av), C)
            rhs = gv - q
            if s > 4 * m * r:
                # K = D2 - W W^T with W the row-scaled copies of U
                W = np.hstack([C[:, j : j + 1] * U for j in range(r)])
                Wd = W / d2[:, None]
                small = np.eye(m * r) - W.T @ Wd
                mu = rhs / d2 + Wd @ np.linalg.solve(small, Wd.T @ rhs)
            else:
                S = U @ U.T
                K = np.diag(d2) - (C @ C.T) * S
                mu = np.linalg.solve(K, rhs)
            Lam = M.affine.gram_solve(Av - A[:, M.binary_rows] @ (mu[:, None] * C))
        else:
            raise ValueError(f"unknown tangent solve path {force_path!r}")
    except np.linalg.LinAlgError as e:
        raise TangentSolveSingular(f"tangent KKT solve failed: {e}") from e

    xi = v - A.T @ Lam - _embed_binary(M, mu, C)
    return TangentVector(xi=xi, base=R)


def _check_projector(P: np.ndarray, name: str) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise NonProjector(f"{name} is not square: shape {P.shape}")
    if not np.allclose(P, P.T, atol=1e-10):
        raise NonProjector(f"{name} is not symmetric to 1e-10")
    if not np.allclose(P @ P, P, atol=1e-10):
        raise NonProjector(f"{name} is not idempotent to 1e-10")
    return P


def angle_cosine(P1: np.ndarray, P2: np.ndarray, Pcap: np.ndarray) -> float:
    """Spectral norm ||P2 P1 - Pcap||_2, the cosine of the principal angle
    between the subspaces relative to their intersection. Values strictly
    below 1 drive the linear contraction of alternating projections."""
    P1 = _check_projector(P1, "P1")
    P2 = _check_projector(P2, "P2")
    Pcap = _check_projector(Pcap, "Pcap")
    if P1.shape != P2.shape or P1.shape != Pcap.shape:
        raise NonProjector(
            f"projector shapes disagree: {P1.shape}, {P2.shape}, {Pcap.shape}"
        )
    return float(np.linalg.norm(P2 @ P1 - Pcap, 2))
