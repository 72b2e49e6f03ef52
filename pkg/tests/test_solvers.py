"""Oracle tests for the retraction step maps and drivers.

The brute-force KKT oracles below assemble each step's optimality system
densely in the full variable space and solve it with a generic linear
solver. They share no elimination structure with the implementation, so
agreement validates the Schur-complement and Woodbury paths.
"""

import numpy as np
import pytest

from isectret import manifold as mf
from isectret import problems as pb
from isectret import solvers as sv
from isectret.errors import (
    DegenerateRow,
    InitialResidualTooLarge,
    MaxIterExceeded,
    VanishingDirection,
)

# ---------------------------------------------------------------------------
# shared instance builders


def decoupled_manifold(N=7, s=4, m=2, r=3, seed=0):
    """Affine rows touch only the non-binary block, so exact feasible points
    can be written down without solving anything."""
    rng = np.random.default_rng(seed)
    A = np.zeros((m, N))
    A[:, s:] = rng.standard_normal((m, N - s))
    b = rng.standard_normal(m)
    return mf.IntersectionManifold(A, b, binary_rows=np.arange(s), r=r)


def feasible_point(M, seed=0):
    rng = np.random.default_rng(seed + 1000)
    N, r, s = M.dims.N, M.dims.r, M.dims.s
    R = np.zeros((N, r))
    for k, i in enumerate(M.binary_rows):
        u = rng.standard_normal(r)
        u /= np.linalg.norm(u)
        R[i] = 0.5 * u
        R[i, 0] += 0.5
    free = np.setdiff1d(np.arange(N), M.binary_rows)
    A2 = M.affine.A[:, free]
    target = np.zeros((M.dims.m_rows, r))
    target[:, 0] = M.affine.b_col
    target -= M.affine.A[:, M.binary_rows] @ R[M.binary_rows]
    R[free] = np.linalg.lstsq(A2, target, rcond=None)[0]
    assert mf.combined_residual(M, R) < 1e-10
    return R


def unit_tangent(M, R, seed=0):
    rng = np.random.default_rng(seed + 2000)
    xi = mf.project_tangent(M, R, rng.standard_normal(R.shape)).xi
    return xi / np.linalg.norm(xi)


def qkp_setup(n=10, r=3, seed=2, density=0.7):
    """Knapsack lift: the affine rows carry the item weights, so the two
    constraint blocks are genuinely coupled (unlike decoupled_manifold,
    where one APM sweep already lands on the intersection)."""
    inst = pb.gen_qkp(n, density, seed)
    prob = pb.lift_qkp(inst, r=r)
    x = pb.feasible_init(prob, r=r)
    return prob.manifold, x


def coupled_setup(seed=15, N=9, s=4, m=2, r=2):
    """Coupled instance with orthonormal affine rows. The knapsack lift's
    doubled slack makes its two affine rows nearly parallel, which drags the
    alternating-projection contraction factor to 1 - O(1/||a||^2); driver
    convergence tests need a well-conditioned instance instead."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, N))
    q, _ = np.linalg.qr(A.T)
    A = q.T[:m]
    b = 0.3 * rng.standard_normal(m)
    M = mf.IntersectionManifold(A, b, binary_rows=np.arange(s), r=r)
    return M, feasible_point(M, seed=seed)


def general_manifold(seed):
    """Small instance whose affine rows also touch binary rows (general
    position), sized for the dense KKT oracles: N <= 8, r <= 2, s <= 3."""
    rng = np.random.default_rng(seed)
    N = int(rng.integers(4, 9))
    r = int(rng.integers(1, 3))
    s = int(rng.integers(1, min(4, N - 1)))
    m = int(rng.integers(1, 3))
    A = rng.standard_normal((m, N))
    b = rng.standard_normal(m)
    rows = np.sort(rng.choice(N, size=s, replace=False))
    return mf.IntersectionManifold(A, b, binary_rows=rows, r=r)


def point_on_m1(M, seed, spread=1.0):
    rng = np.random.default_rng(seed + 5000)
    R = mf.project_affine(M, spread * rng.standard_normal((M.dims.N, M.dims.r)))
    # keep clear of the sphere centers so row normals are well-scaled
    C = mf.row_normals(M, R)
    assert np.min(np.linalg.norm(C, axis=1)) > 1e-3
    return R


def _vec(X):
    return np.ravel(X)  # row-major, matching the oracle kron conventions


def embed_rows(M, mu, C):
    out = np.zeros((M.dims.N, M.dims.r))
    out[M.binary_rows] = mu[:, None] * C
    return out


# ---------------------------------------------------------------------------
# brute-force KKT oracles (independent dense assemblies)


def newton_kkt_oracle(M, R):
    """Minimize ||X - R||^2 s.t. A X = b e1^T and <c_i, X_i - Rt_i> = 0,
    assembled over the full (Nr + mr + s) KKT system."""
    A, b = M.affine.A, M.affine.b_col
    N, r, m, s = M.dims.N, M.dims.r, M.dims.m_rows, M.dims.s
    Rt = mf.project_binary(M, R)
    C = mf.row_normals(M, Rt)
    nv, nl = N * r, m * r
    K = np.zeros((nv + nl + s, nv + nl + s))
    rhs = np.zeros(nv + nl + s)
    K[:nv, :nv] = np.eye(nv)
    Akron = np.kron(A, np.eye(r))
    K[:nv, nv : nv + nl] = Akron.T
    cols = np.zeros((nv, s))
    for k, i in enumerate(M.binary_rows):
        e = np.zeros(N)
        e[i] = 1.0
        cols[:, k] = np.kron(e, C[k])
    K[:nv, nv + nl :] = cols
    K[nv : nv + nl, :nv] = Akron
    K[nv + nl :, :nv] = cols.T
    rhs[:nv] = _vec(R)
    bmat = np.zeros((m, r))
    bmat[:, 0] = b
    rhs[nv : nv + nl] = _vec(bmat)
    rhs[nv + nl :] = np.einsum("ij,ij->i", C, Rt[M.binary_rows])
    sol = np.linalg.solve(K, rhs)
    return sol[:nv].reshape(N, r)


def relaxed_kkt_oracle(M, R):
    """Same projection but with the single relaxed constraint <D, X-Rt> = 0."""
    A, b = M.affine.A, M.affine.b_col
    N, r, m = M.dims.N, M.dims.r, M.dims.m_rows
    Rt = mf.project_binary(M, R)
    D = R - Rt
    nv, nl = N * r, m * r
    K = np.zeros((nv + nl + 1, nv + nl + 1))
    rhs = np.zeros(nv + nl + 1)
    K[:nv, :nv] = np.eye(nv)
    Akron = np.kron(A, np.eye(r))
    K[:nv, nv : nv + nl] = Akron.T
    K[:nv, -1] = _vec(D)
    K[nv : nv + nl, :nv] = Akron
    K[-1, :nv] = _vec(D)
    rhs[:nv] = _vec(R)
    bmat = np.zeros((m, r))
    bmat[:, 0] = b
    rhs[nv : nv + nl] = _vec(bmat)
    rhs[-1] = np.vdot(D, Rt)
    sol = np.linalg.solve(K, rhs)
    return sol[:nv].reshape(N, r)


def aphl_delta_oracle(M, R):
    """Correction delta = -A^T Lam + T_B*(mu) with A delta = -E and
    <c_i, delta_i> = 0, solved densely in (Lam, mu)."""
    A = M.affine.A
    N, r, m, s = M.dims.N, M.dims.r, M.dims.m_rows, M.dims.s
    E = mf.affine_residual(M, R)
    C = mf.row_normals(M, R)
    G = A @ A.T
    nl = m * r
    K = np.zeros((nl + s, nl + s))
    rhs = np.zeros(nl + s)
    K[:nl, :nl] = -np.kron(G, np.eye(r))
    for k, i in enumerate(M.binary_rows):
        K[:nl, nl + k] = np.kron(A[:, i], C[k])
        K[nl + k, :nl] = -np.kron(A[:, i], C[k])
        K[nl + k, nl + k] = float(C[k] @ C[k])
    rhs[:nl] = -_vec(E)
    sol = np.linalg.solve(K, rhs)
    Lam = sol[:nl].reshape(m, r)
    mu = sol[nl:]
    return -A.T @ Lam + embed_rows(M, mu, C)


# ---------------------------------------------------------------------------
# retract_tol


def test_retract_tol_frozen():
    assert sv.retract_tol(1.0, 1) == pytest.approx(0.01)
    assert sv.retract_tol(1e-12, 1) == pytest.approx(1e-9)
    assert sv.retract_tol(10.0, 10) == pytest.approx(1e-3)


# ---------------------------------------------------------------------------
# config types


def test_tapr_params_validation():
    p = sv.TaprParams()
    assert p.a0 == 1.0 and p.a1 == 1e-2 and p.a2 is None
    assert (p.mu0, p.mu1, p.mu2) == (0.05, 0.1, 0.3)
    sv.TaprParams(a1=0.999, a2=0.999)  # equality allowed (degenerate config)
    with pytest.raises(ValueError):
        sv.TaprParams(a1=1e-3, a2=1e-2)  # a1 < a2
    with pytest.raises(ValueError):
        sv.TaprParams(a1=1.5)
    with pytest.raises(ValueError):
        sv.TaprParams(mu0=0.2, mu1=0.1)
    with pytest.raises(ValueError):
        sv.TaprParams(mu2=1.0)
    with pytest.raises(ValueError):
        sv.TaprParams(a0=0.0)


def test_retraction_config_validation():
    sv.RetractionConfig(kind=sv.RetractionKind.APM)
    with pytest.raises(ValueError):
        sv.RetractionConfig(kind=sv.RetractionKind.APM, tol=1e-16)
    with pytest.raises(ValueError):
        sv.RetractionConfig(kind=sv.RetractionKind.APM, maxiter=0)
    with pytest.raises(ValueError):
        sv.RetractionConfig(kind=sv.RetractionKind.APM, schur_path="fast")


# ---------------------------------------------------------------------------
# apm_step / iap_step


def test_apm_step_fixed_point():
    M = decoupled_manifold(seed=1)
    R = feasible_point(M, seed=1)
    assert np.allclose(sv.apm_step(M, R), R, atol=1e-12)


def test_apm_step_lands_on_affine_set():
    M = decoupled_manifold(seed=2)
    rng = np.random.default_rng(5)
    R = feasible_point(M, seed=2) + 0.1 * rng.standard_normal((M.dims.N, M.dims.r))
    out = sv.apm_step(M, R)
    scale = np.linalg.norm(out) + 1.0
    assert np.linalg.norm(mf.affine_residual(M, out)) < 1e-10 * scale


def test_apm_step_displacement_second_order_in_t():
    M = decoupled_manifold(seed=3)
    x = feasible_point(M, seed=3)
    eta = unit_tangent(M, x, seed=3)
    ts = np.logspace(-3, -6, 6)
    moves = []
    for t in ts:
        R = x + t * eta
        moves.append(np.linalg.norm(sv.apm_step(M, R) - R))
    slope = np.polyfit(np.log10(ts), np.log10(moves), 1)[0]
    assert slope >= 1.8


def test_iap_step_fixed_point():
    M = decoupled_manifold(seed=4)
    R = feasible_point(M, seed=4)
    assert np.allclose(sv.iap_step(M, R), R, atol=1e-12)


def test_iap_matches_apm_to_second_order():
    M = decoupled_manifold(seed=5)
    x = feasible_point(M, seed=5)
    rng = np.random.default_rng(11)
    W = rng.standard_normal(x.shape)
    ratios = []
    for t in np.logspace(-2, -5, 6):
        R = x + t * W
        d = np.linalg.norm(mf.project_binary(M, R) - R)
        gap = np.linalg.norm(sv.iap_step(M, R) - sv.apm_step(M, R))
        ratios.append(gap / d**2)
    med = np.median(ratios)
    assert np.max(ratios) <= 10 * med


def test_iap_residual_contracts_linearly():
    M = decoupled_manifold(seed=6)
    x = feasible_point(M, seed=6)
    R = x + 1e-2 * unit_tangent(M, x, seed=6)
    res = [mf.combined_residual(M, R)]
    for _ in range(8):
        R = sv.iap_step(M, R)
        res.append(mf.combined_residual(M, R))
    res = np.array(res)
    live = res > 1e-14
    assert np.all(res[1:][live[:-1]] < res[:-1][live[:-1]])


# ---------------------------------------------------------------------------
# newton_slra_step


def test_newton_slra_fixed_point():
    M = decoupled_manifold(seed=7)
    R = feasible_point(M, seed=7)
    assert np.allclose(sv.newton_slra_step(M, R), R, atol=1e-11)


def test_newton_slra_matches_brute_force_kkt():
    for seed in range(10):
        M = general_manifold(seed)
        R = point_on_m1(M, seed)
        want = newton_kkt_oracle(M, R)
        got = sv.newton_slra_step(M, R)
        scale = np.linalg.norm(want) + 1.0
        assert np.linalg.norm(got - want) < 1e-10 * scale, f"seed {seed}"


def test_newton_slra_output_slices():
    # output stays on M1 and on the tangent slice of M2 at Rt
    M = general_manifold(3)
    R = point_on_m1(M, 3)
    out = sv.newton_slra_step(M, R)
    scale = np.linalg.norm(out) + 1.0
    assert np.linalg.norm(mf.affine_residual(M, out)) < 1e-9 * scale
    Rt = mf.project_binary(M, R)
    C = mf.row_normals(M, Rt)
    slice_res = np.einsum("ij,ij->i", C, (out - Rt)[M.binary_rows])
    assert np.max(np.abs(slice_res)) < 1e-9 * scale


def test_newton_slra_direct_smw_agree():
    # one instance in each auto regime, both paths forced on each
    for N, s, m, r, seed in ((40, 30, 1, 2, 13), (12, 4, 2, 3, 17)):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((m, N))
        b = rng.standard_normal(m)
        M = mf.IntersectionManifold(A, b, binary_rows=np.arange(s), r=r)
        R = point_on_m1(M, seed)
        d = sv.newton_slra_step(M, R, schur_path="direct")
        w = sv.newton_slra_step(M, R, schur_path="smw")
        scale = np.linalg.norm(d) + 1.0
        assert np.linalg.norm(d - w) < 1e-10 * scale


# ---------------------------------------------------------------------------
# relaxed_newton_slra_step


def test_relaxed_step_vanishing_direction_on_manifold():
    M = decoupled_manifold(seed=8)
    R = feasible_point(M, seed=8)
    with pytest.raises(VanishingDirection):
        sv.relaxed_newton_slra_step(M, R)


def test_relaxed_step_constraint_consistency():
    M = general_manifold(21)
    R = point_on_m1(M, 21)
    Rt = mf.project_binary(M, R)
    D = R - Rt
    out = sv.relaxed_newton_slra_step(M, R)
    num = abs(np.vdot(D, out - Rt))
    assert num < 1e-10 * np.linalg.norm(D) * max(np.linalg.norm(out - Rt), 1e-30)
    scale = np.linalg.norm(out) + 1.0
    assert np.linalg.norm(mf.affine_residual(M, out)) < 1e-10 * scale


def test_relaxed_matches_brute_force_kkt():
    for seed in range(10):
        M = general_manifold(seed + 100)
        R = point_on_m1(M, seed + 100)
        want = relaxed_kkt_oracle(M, R)
        got = sv.relaxed_newton_slra_step(M, R)
        scale = np.linalg.norm(want) + 1.0
        assert np.linalg.norm(got - want) < 1e-10 * scale, f"seed {seed}"


def test_relaxed_equals_newton_when_single_binary_row():
    hits = 0
    for seed in range(30):
        M = general_manifold(seed + 200)
        if M.dims.s != 1:
            continue
        hits += 1
        R = point_on_m1(M, seed + 200)
        a = sv.relaxed_newton_slra_step(M, R)
        b = sv.newton_slra_step(M, R)
        scale = np.linalg.norm(b) + 1.0
        assert np.linalg.norm(a - b) < 1e-9 * scale, f"seed {seed}"
    assert hits >= 3


# ---------------------------------------------------------------------------
# aphl_step


def test_aphl_fixed_point():
    M = decoupled_manifold(seed=9)
    R = feasible_point(M, seed=9)
    assert np.allclose(sv.aphl_step(M, R), R, atol=1e-11)


def test_aphl_matches_brute_force():
    for seed in range(10):
        M = general_manifold(seed + 300)
        rng = np.random.default_rng(seed + 300)
        # point on M2 with a nonzero affine residual
        R = mf.project_binary(M, rng.standard_normal((M.dims.N, M.dims.r)))
        delta = aphl_delta_oracle(M, R)
        want = mf.project_binary(M, R + delta)
        got = sv.aphl_step(M, R)
        scale = np.linalg.norm(want) + 1.0
        assert np.linalg.norm(got - want) < 1e-10 * scale, f"seed {seed}"
        # the correction is row-tangent at R and cancels the affine residual
        C = mf.row_normals(M, R)
        dots = np.einsum("ij,ij->i", C, delta[M.binary_rows])
        assert np.max(np.abs(dots)) < 1e-10 * (np.linalg.norm(delta) + 1.0)
        post = mf.affine_residual(M, R + delta)
        assert np.linalg.norm(post) < 1e-9 * (np.linalg.norm(R) + 1.0)


def test_aphl_affine_residual_decays_quadratically():
    M, x = qkp_setup(n=8, r=2, seed=4)
    rng = np.random.default_rng(23)
    Lam = rng.standard_normal((M.dims.m_rows, M.dims.r))
    normal_dir = M.affine.A.T @ Lam
    normal_dir /= np.linalg.norm(normal_dir)
    ratios = []
    for t in np.logspace(-2, -4, 5):
        R = mf.project_binary(M, x + t * normal_dir)
        before = np.linalg.norm(mf.affine_residual(M, R))
        assert before > 1e-8  # perturbation actually leaves the affine set
        out = sv.aphl_step(M, R)
        after = np.linalg.norm(mf.affine_residual(M, out))
        ratios.append(after / before**2)
    med = np.median(ratios)
    assert np.max(ratios) <= 10 * max(med, 1e-18)


# ---------------------------------------------------------------------------
# GWA / GWA-Newton dual iterations


def _dual_data(M, V):
    e = np.ones(M.dims.N)
    Vp = V.copy()
    Vp[:, 0] -= 0.5
    gamma = M.affine.A @ e - 2.0 * M.affine.b_col
    return Vp, gamma


def test_gwa_fixed_point_is_stationary():
    M = decoupled_manifold(seed=11)
    x = feasible_point(M, seed=11)
    V = x + 0.05 * unit_tangent(M, x, seed=11)
    Vp, gamma = _dual_data(M, V)
    Theta = np.zeros((M.dims.m_rows, M.dims.r))
    for _ in range(2000):
        nxt = sv.gwa_iterate(M, Vp, gamma, Theta)
        if np.linalg.norm(nxt - Theta) <= 1e-14 * (np.linalg.norm(Theta) + 1):
            Theta = nxt
            break
        Theta = nxt
    again = sv.gwa_iterate(M, Vp, gamma, Theta)
    assert np.allclose(again, Theta, atol=1e-10 * (np.linalg.norm(Theta) + 1))
    # stationarity of the dual objective
    Y = Vp + M.affine.A.T @ Theta
    v = np.full(M.dims.N, 2.0)
    nb = np.linalg.norm(Y[M.binary_rows], axis=1)
    v[M.binary_rows] = 1.0 / np.maximum(nb, 1e-12)
    grad = M.affine.A @ (v[:, None] * Y)
    grad[:, 0] += gamma
    assert np.linalg.norm(grad) < 1e-8 * (np.linalg.norm(Theta) + 1)


def test_gwa_objective_nonincreasing():
    M = decoupled_manifold(seed=12)
    rng = np.random.default_rng(31)
    x = feasible_point(M, seed=12)
    V = x + 0.1 * rng.standard_normal(x.shape)
    Vp, gamma = _dual_data(M, V)
    for _ in range(100):
        Theta = rng.standard_normal((M.dims.m_rows, M.dims.r))
        g0 = sv.gwa_objective(M, Vp, gamma, Theta)
        g1 = sv.gwa_objective(M, Vp, gamma, sv.gwa_iterate(M, Vp, gamma, Theta))
        assert g1 <= g0 + 1e-10 * (abs(g0) + 1.0)


def test_gwa_tiny_grid_oracle():
    # N=4, r=1, s=2, m=1: the dual variable is a scalar
    A = np.array([[0.7, -0.4, 1.1, 0.6]])
    b = np.array([0.9])
    M = mf.IntersectionManifold(A, b, binary_rows=[0, 1], r=1)
    rng = np.random.default_rng(41)
    V = rng.standard_normal((4, 1))
    Vp, gamma = _dual_data(M, V)

    def G(th):
        return sv.gwa_objective(M, Vp, gamma, np.array([[th]]))

    grid = np.linspace(-10.0, 10.0, 20001)
    vals = [G(t) for t in grid]
    k = int(np.argmin(vals))
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(G, bounds=(grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]), method="bounded", options={"xatol": 1e-12})
    theta = np.zeros((1, 1))
    for _ in range(5000):
        nxt = sv.gwa_iterate(M, Vp, gamma, theta)
        if np.linalg.norm(nxt - theta) <= 1e-14 * (np.linalg.norm(theta) + 1):
            theta = nxt
            break
        theta = nxt
    assert theta[0, 0] == pytest.approx(res.x, abs=1e-6)


def test_gwa_newton_zero_direction_at_stationary_point():
    M = decoupled_manifold(seed=13)
    x = feasible_point(M, seed=13)
    V = x + 0.05 * unit_tangent(M, x, seed=13)
    Vp, gamma = _dual_data(M, V)
    Theta = np.zeros((M.dims.m_rows, M.dims.r))
    for _ in range(5000):
        nxt = sv.gwa_iterate(M, Vp, gamma, Theta)
        if np.linalg.norm(nxt - Theta) <= 1e-15 * (np.linalg.norm(Theta) + 1):
            Theta = nxt
            break
        Theta = nxt
    out = sv.gwa_newton_iterate(M, Vp, gamma, Theta)
    assert np.allclose(out, Theta, atol=1e-10 * (np.linalg.norm(Theta) + 1))


def test_gwa_newton_direct_smw_agree():
    for N, s, m, r, seed in ((30, 25, 1, 2, 51), (10, 3, 2, 2, 53)):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((m, N))
        b = rng.standard_normal(m)
        M = mf.IntersectionManifold(A, b, binary_rows=np.arange(s), r=r)
        V = rng.standard_normal((N, r))
        Vp, gamma = _dual_data(M, V)
        Theta = 0.1 * rng.standard_normal((m, r))
        d = sv.gwa_newton_iterate(M, Vp, gamma, Theta, schur_path="direct")
        w = sv.gwa_newton_iterate(M, Vp, gamma, Theta, schur_path="smw")
        assert np.linalg.norm(d - w) < 1e-9 * (np.linalg.norm(d) + 1.0)


def test_gwa_newton_superlinear_near_limit():
    M = decoupled_manifold(seed=14)
    x = feasible_point(M, seed=14)
    V = x + 0.05 * unit_tangent(M, x, seed=14)
    Vp, gamma = _dual_data(M, V)
    Theta = np.zeros((M.dims.m_rows, M.dims.r))
    for _ in range(20000):
        nxt = sv.gwa_iterate(M, Vp, gamma, Theta)
        if np.linalg.norm(nxt - Theta) <= 1e-15 * (np.linalg.norm(Theta) + 1):
            Theta = nxt
            break
        Theta = nxt
    rng = np.random.default_rng(61)
    cur = Theta + 1e-3 * rng.standard_normal(Theta.shape)
    errs = [np.linalg.norm(cur - Theta)]
    for _ in range(5):
        cur = sv.gwa_newton_iterate(M, Vp, gamma, cur)
        errs.append(np.linalg.norm(cur - Theta))
        if errs[-1] < 1e-12:
            break
    assert errs[-1] < 1e-10


# ---------------------------------------------------------------------------
# metric_project


def test_metric_project_fixed_on_manifold():
    M = decoupled_manifold(seed=15)
    x = feasible_point(M, seed=15)
    out = sv.metric_project(M, x, method="gwa", tol=1e-13, maxiter=2000)
    assert np.allclose(out, x, atol=1e-10)


def test_metric_project_feasible_and_kkt():
    M = decoupled_manifold(seed=16)
    x = feasible_point(M, seed=16)
    rng = np.random.default_rng(71)
    V = x + 0.05 * rng.standard_normal(x.shape)
    out = sv.metric_project(M, V, method="gwa", tol=1e-13, maxiter=5000)
    scale = np.linalg.norm(out) + 1.0
    assert mf.combined_residual(M, out) < 1e-9 * scale
    resid = mf.project_tangent(M, out, V - out).xi
    assert np.linalg.norm(resid) < 1e-8 * (np.linalg.norm(V - out) + 1.0)


def test_metric_project_methods_agree():
    M = decoupled_manifold(seed=17)
    x = feasible_point(M, seed=17)
    rng = np.random.default_rng(73)
    V = x + 0.05 * rng.standard_normal(x.shape)
    a = sv.metric_project(M, V, method="gwa", tol=1e-13, maxiter=5000)
    b = sv.metric_project(M, V, method="gwa-newton", tol=1e-13, maxiter=200)
    assert np.linalg.norm(a - b) < 1e-8 * (np.linalg.norm(a) + 1.0)


def test_metric_project_maxiter():
    M = decoupled_manifold(seed=18)
    x = feasible_point(M, seed=18)
    V = x + 0.3 * np.ones_like(x)
    with pytest.raises(MaxIterExceeded):
        sv.metric_project(M, V, method="gwa", tol=1e-15, maxiter=1)


# ---------------------------------------------------------------------------
# retract driver


ALL_KINDS = list(sv.RetractionKind)


def test_retract_zero_eta_returns_x_exactly():
    M = decoupled_manifold(seed=19)
    x = feasible_point(M, seed=19)
    eta = np.zeros_like(x)
    for kind in ALL_KINDS:
        cfg = sv.RetractionConfig(kind=kind, tol=1e-9, maxiter=50)
        res = sv.retract(M, x, eta, cfg)
        assert res.converged
        assert np.array_equal(res.point, x), kind
        assert res.kind is kind


def test_retract_converges_small_step_all_kinds():
    M, x = coupled_setup()
    eta = 0.02 * unit_tangent(M, x, seed=20)
    for kind in ALL_KINDS:
        cfg = sv.RetractionConfig(kind=kind, tol=1e-11, maxiter=500)
        res = sv.retract(M, x, eta, cfg)
        assert res.converged, kind
        scale = np.linalg.norm(res.point) + 1.0
        assert mf.combined_residual(M, res.point) <= 1e-11 * scale, kind
        # first-order agreement: the retraction stays near x + eta
        assert np.linalg.norm(res.point - (x + eta)) < 0.5 * np.linalg.norm(eta), kind
        assert len(res.trace.phases) <= cfg.maxiter + 1


def test_retract_rejects_infeasible_base():
    M = decoupled_manifold(seed=21)
    x = feasible_point(M, seed=21) + 0.5
    cfg = sv.RetractionConfig(kind=sv.RetractionKind.APM)
    with pytest.raises(ValueError):
        sv.retract(M, x, np.zeros_like(x), cfg)


def test_retract_rejects_non_tangent_eta():
    M = decoupled_manifold(seed=22)
    x = feasible_point(M, seed=22)
    bad = np.ones_like(x)  # violates both linearized constraints
    cfg = sv.RetractionConfig(kind=sv.RetractionKind.APM)
    with pytest.raises(ValueError):
        sv.retract(M, x, bad, cfg)


def test_retract_maxiter_carries_partial_result():
    M, x = qkp_setup(n=10, r=3, seed=2)
    eta = 0.1 * unit_tangent(M, x, seed=23)
    cfg = sv.RetractionConfig(
        kind=sv.RetractionKind.APM, tol=1e-15, maxiter=2, tol_absolute=True
    )
    with pytest.raises(MaxIterExceeded) as exc:
        sv.retract(M, x, eta, cfg)
    res = exc.value.result
    assert res is not None and not res.converged
    assert len(res.trace.combined) >= 1


def test_retract_apm_binary_residual_contracts():
    M, x = coupled_setup()
    eta = 1e-2 * unit_tangent(M, x, seed=24)
    cfg = sv.RetractionConfig(
        kind=sv.RetractionKind.APM, tol=1e-13, maxiter=400, tol_absolute=True
    )
    res = sv.retract(M, x, eta, cfg)
    binary = np.array(res.trace.binary)
    seq = binary[binary > 1e-13]
    assert seq.size >= 6, "instance converged too fast to observe the rate"
    ratios = seq[1:] / seq[:-1]
    assert np.max(ratios[-5:]) < 1.0


def test_retract_newton_quadratic_tail():
    M, x = coupled_setup()
    eta = 0.35 * unit_tangent(M, x, seed=25)
    start = mf.combined_residual(M, x + eta)
    assert 1e-4 < start < 0.5
    cfg = sv.RetractionConfig(
        kind=sv.RetractionKind.NewtonSLRA, tol=1e-12, maxiter=20, tol_absolute=True
    )
    res = sv.retract(M, x, eta, cfg)
    assert res.converged
    assert all(p in ("init", "newton-slra") for p in res.trace.phases), res.trace.phases
    steps = len(res.trace.phases) - 1
    assert steps <= 6
    logs = np.log10([c for c in res.trace.combined if c > 1e-12])
    for k in range(1, len(logs)):
        assert logs[k] <= 1.9 * logs[k - 1] or logs[k] < -10


def test_retract_tol_absolute_flag():
    M = decoupled_manifold(seed=26)
    x = feasible_point(M, seed=26)
    eta = 0.01 * unit_tangent(M, x, seed=26)
    cfg = sv.RetractionConfig(
        kind=sv.RetractionKind.NewtonSLRA, tol=1e-13, maxiter=100, tol_absolute=True
    )
    res = sv.retract(M, x, eta, cfg)
    assert res.converged
    assert mf.combined_residual(M, res.point) <= 1e-13


# ---------------------------------------------------------------------------
# TAPR


def test_tapr_zero_eta():
    M, x = qkp_setup(n=10, r=3, seed=2)
    res = sv.tapr(M, x, np.zeros_like(x), sv.TaprParams(), tol=1e-9, maxiter=50)
    assert res.converged
    assert np.array_equal(res.point, x)
    # zero steps taken: the only record is the initial one, in the APM phase
    assert res.trace.phases == ["apm"]


def test_tapr_initial_residual_guard():
    M, x = qkp_setup(n=10, r=3, seed=2)
    eta = 5.0 * unit_tangent(M, x, seed=28)
    params = sv.TaprParams(a0=1e-6)
    with pytest.raises(InitialResidualTooLarge):
        sv.tapr(M, x, eta, params, tol=1e-9, maxiter=50)


def test_tapr_converges_and_traces_phases():
    M, x = qkp_setup(n=12, r=3, seed=6)
    eta = 0.5 * unit_tangent(M, x, seed=29)
    params = sv.TaprParams()
    res = sv.tapr(M, x, eta, params, tol=1e-11, maxiter=300, tol_absolute=True)
    assert res.converged
    assert mf.combined_residual(M, res.point) <= 1e-11
    assert res.trace.phases[0] == "apm"  # initial record, no step yet
    assert res.trace.phases[1] == "apm"  # machine always starts in the APM phase
    tags = res.trace.phases
    errs = res.trace.combined
    # iAP trials happen only after err has crossed below a1
    for k in range(1, len(tags)):
        if tags[k].startswith("iap"):
            assert errs[k - 1] < params.a1
    # the second-order phase is entered at the a2 crossing or on a slow probe
    a2 = 1e-11 * 1e3  # default a2 resolves to tol * 10^3
    first_newton = next((k for k, t in enumerate(tags) if t.startswith("newton")), None)
    assert first_newton is not None
    assert errs[first_newton - 1] <= a2 or tags[first_newton - 1] == "iap-reject"


def test_tapr_degenerate_thresholds_match_newton_limit():
    M, x = qkp_setup(n=12, r=3, seed=6)
    # small eta keeps the comparison inside the second-order basin, where the
    # limit maps of the hybrid and of plain NewtonSLRA agree to third order
    eta = 1e-3 * unit_tangent(M, x, seed=30)
    params = sv.TaprParams(a1=0.999, a2=0.999)
    res = sv.tapr(M, x, eta, params, tol=1e-12, maxiter=100, tol_absolute=True)
    assert res.converged
    # after the first APM iteration the machine moves through one iAP
    # iteration into the second-order phase
    tags = res.trace.phases
    assert tags[1] == "apm"
    assert any(t.startswith("newton") for t in tags)
    cfg = sv.RetractionConfig(
        kind=sv.RetractionKind.NewtonSLRA, tol=1e-12, maxiter=100, tol_absolute=True
    )
    ref = sv.retract(M, x, eta, cfg)
    assert np.linalg.norm(res.point - ref.point) < 1e-8 * (np.linalg.norm(ref.point) + 1.0)


def test_tapr_accepted_newton_steps_decrease_merit():
    M, x = qkp_setup(n=12, r=3, seed=6)
    eta = 0.5 * unit_tangent(M, x, seed=31)
    params = sv.TaprParams()
    res = sv.tapr(M, x, eta, params, tol=1e-12, maxiter=300, tol_absolute=True)
    errs = res.trace.combined
    for k, tag in enumerate(res.trace.phases):
        if tag == "newton" and k >= 1:
            assert errs[k] ** 2 <= (1 - params.mu2) * errs[k - 1] ** 2 + 1e-30


def test_tapr_rejections_count_against_maxiter():
    M, x = qkp_setup(n=12, r=3, seed=6)
    eta = 0.5 * unit_tangent(M, x, seed=32)
    # acceptance made nearly impossible for iAP and second-order steps
    params = sv.TaprParams(a1=0.5, a2=0.45, mu0=0.05, mu1=1 - 1e-12, mu2=1 - 1e-12)
    with pytest.raises(MaxIterExceeded) as exc:
        sv.tapr(M, x, eta, params, tol=1e-13, maxiter=8, tol_absolute=True)
    res = exc.value.result
    assert res is not None
    # every trial, accepted or rejected, appears in the trace
    assert len(res.trace.phases) == 9  # initial record + 8 trials
    rejected = [p for p in res.trace.phases if p.endswith("reject")]
    assert rejected, "expected at least one rejected trial"
    # err is kept from the last accepted point: never increases on a reject
    errs = res.trace.combined
    for k, tag in enumerate(res.trace.phases):
        if tag.endswith("reject") and k >= 1:
            assert errs[k] == pytest.approx(errs[k - 1])


# ---------------------------------------------------------------------------
# degenerate-row retry inside the drivers


def test_step_retry_perturbs_offending_row_once():
    recorded = []

    def step(R):
        recorded.append(R.copy())
        if len(recorded) == 1:
            raise DegenerateRow(1)
        return R + 1.0

    y = np.ones((3, 2))
    out = sv._step_with_retry(step, y, iteration=4)
    assert len(recorded) == 2
    assert np.array_equal(out, recorded[1] + 1.0)
    bump = recorded[1] - y
    assert np.all(bump[0] == 0.0) and np.all(bump[2] == 0.0)
    assert np.linalg.norm(bump[1]) == pytest.approx(1e-12)


def test_step_retry_propagates_second_failure_with_iteration():
    def step(R):
        raise DegenerateRow(0)

    with pytest.raises(DegenerateRow) as exc:
        sv._step_with_retry(step, np.ones((2, 2)), iteration=7)
    assert exc.value.iteration == 7
