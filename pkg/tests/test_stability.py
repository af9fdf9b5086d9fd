import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given
from hypothesis import strategies as st

from svlab.femspace import (
    assemble_divergence, assemble_h1_gram, build_pressure_space, build_velocity_space, plain_dg,
    quad_groups,
)
from svlab.mesh import G0, G1, crossing_square, refined, single_triangle_enclosed, unit_square_initial
from svlab.stability import (
    CSV_HEADER, UnsupportedMeshError, b_singular, discrete_dual_norm, infsup_general_p_upper,
    infsup_p2, project_coefficients, project_dg, projection_lp_norm, quadrature_lp, reports_to_csv,
)

T0 = unit_square_initial()
CROSS = crossing_square(0.0)


def sinsin(X):
    return np.sin(np.pi * X[..., 0]) * np.sin(np.pi * X[..., 1])


def inner_dg(Q, f, c, degree=20):
    """(f, sum c_i psi_i) by an independent high-order rule."""
    g = quad_groups(Q.mesh, degree)[0]
    X = Q.geom.to_physical(g.cells, g.pts)
    wdet = g.weights[None] * Q.geom.det[g.cells][:, None]
    vals = np.einsum("eql,el->eq", Q.tables(g), c[Q.cell_dofs[g.cells]])
    return float(np.sum(wdet * f(X) * vals))


# --- inf-sup at p = 2 ------------------------------------------------------

def test_infsup_t0_regression():
    r = infsup_p2(T0, 4)
    assert 0 < r.beta <= 1
    assert r.flags == ""
    assert r.kind == "exact_p2"
    assert r.beta == pytest.approx(0.2018568839666177, rel=1e-8)


def test_infsup_matches_dense_oracle():
    """Independent computation: orthonormal null-space basis of the constraints by SVD."""
    m = CROSS
    V = build_velocity_space(m, 4, with_bc=True)
    Q = build_pressure_space(m, 3)
    A = assemble_h1_gram(V)[V.free][:, V.free].toarray()
    B = assemble_divergence(V, plain_dg(m, 3))[:, V.free].toarray()
    Nz = sla.null_space(Q.constraints)
    S = Nz.T @ B @ np.linalg.solve(A, B.T @ Nz)
    lam = np.linalg.eigvalsh(0.5 * (S + S.T))[0]
    assert infsup_p2(m, 4).beta == pytest.approx(np.sqrt(lam), rel=1e-8)


def test_infsup_self_consistency():
    rep, x, sysm = infsup_p2(T0, 5, return_vector=True)
    S = sysm.schur()
    lam = (x @ S @ x) / (x @ sysm.Mq @ x)
    assert np.sqrt(lam) == pytest.approx(rep.beta, rel=1e-9)


def test_infsup_seminorm_scale_invariant():
    b1 = infsup_p2(T0, 4, seminorm=True).beta
    b2 = infsup_p2(T0.scaled(2.0), 4, seminorm=True).beta
    assert b2 == pytest.approx(b1, rel=1e-6)


def test_infsup_monotone_in_gamma0():
    left_top = T0.with_tags(lambda mid: G0 if (abs(mid[0]) < 1e-12 or abs(mid[1] - 1) < 1e-12) else G1)
    assert infsup_p2(T0, 4).beta >= infsup_p2(left_top, 4).beta - 1e-12


def test_infsup_report_csv(tmp_path):
    r = infsup_p2(T0, 4)
    row = r.csv_row().split(",")
    assert len(row) == len(CSV_HEADER.split(","))
    assert row[0] == "exact_p2" and float(row[3]) == r.beta
    path = tmp_path / "r.csv"
    reports_to_csv([r, projection_lp_norm(2, 2.0)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER and len(lines) == 3


# --- b_a and projections -----------------------------------------------------

@pytest.mark.parametrize("N", [4, 8, 16])
def test_b_norm_identity(N):
    b = b_singular(CROSS, 4, N, check=False)
    expect = sum(1.0 / CROSS.areas[t] for t in range(4))
    assert b.coef @ b.coef == pytest.approx(expect, rel=1e-10)


def test_b_orthogonal_to_constrained_space(rng):
    Q = build_pressure_space(CROSS, 5)
    b = b_singular(CROSS, 4, 5).coef
    for _ in range(20):
        q = Q.basis_matrix @ rng.normal(size=Q.dim)
        assert abs(b @ q) <= 1e-10 * np.linalg.norm(b) * np.linalg.norm(q)


def test_b_carries_the_constraint():
    Q = build_pressure_space(CROSS, 4)
    b = b_singular(CROSS, 4, 4)
    g = quad_groups(CROSS, 12)[0]
    sup = np.max(np.abs(b.values(g)))
    assert abs(Q.alternating_row(4) @ b.coef) > 1e-6 * sup


def test_b_requires_singular_vertex():
    with pytest.raises(ValueError):
        b_singular(T0, 4, 3)


def test_projection_reproduces_polynomials():
    f = lambda X: 1 + X[..., 0] ** 2 * X[..., 1] - 3 * X[..., 1] ** 3  # noqa: E731
    P = project_dg(refined(T0, 1), 4, f)
    g = quad_groups(P.mesh, 10)[0]
    assert np.max(np.abs(P.values(g) - f(P.space.geom.to_physical(g.cells, g.pts)))) < 1e-12


def test_projection_orthogonality(rng):
    m = refined(T0, 1)
    P = project_dg(m, 4, sinsin, quad_degree=20)
    Q = P.space
    for _ in range(20):
        r = rng.normal(size=Q.dg_dim)
        resid = inner_dg(Q, sinsin, r) - P.coef @ r
        assert abs(resid) < 1e-11 * np.linalg.norm(r)


def test_constrained_projection_kills_alternating_sum():
    P = project_dg(CROSS, 4, sinsin, constrained=True)
    Q = build_pressure_space(CROSS, 3)
    assert abs(Q.alternating_row(4) @ P.coef) < 1e-11


def test_b_correction_equals_orthogonal_projection():
    plain = project_dg(CROSS, 5, sinsin).coef
    corrected = project_dg(CROSS, 5, sinsin, constrained=True).coef
    Q = build_pressure_space(CROSS, 4)
    assert np.allclose(corrected, project_coefficients(Q, plain), atol=1e-12)


@given(seed=st.integers(0, 10_000))
def test_constrained_projection_idempotent_and_orthogonal(seed):
    rng = np.random.default_rng(seed)
    Q = build_pressure_space(CROSS, 3)
    c = rng.normal(size=Q.dg_dim)
    p1 = project_coefficients(Q, c)
    assert np.allclose(project_coefficients(Q, p1), p1, atol=1e-11)
    Z = Q.basis_matrix.toarray()
    assert np.max(np.abs(Z.T @ (c - p1))) <= 1e-10 * np.linalg.norm(c)


def test_constrained_projection_needs_m1():
    with pytest.raises(UnsupportedMeshError):
        project_dg(single_triangle_enclosed(), 3, sinsin, constrained=True)


def test_projection_norm_examples():
    r = projection_lp_norm(0, 2.0)
    assert 1.0 <= r.norm_estimate <= 1 + 1e-9
    for N in (1, 5, 9):
        assert projection_lp_norm(N, 2.0).norm_estimate == pytest.approx(1.0, abs=1e-9)
    assert projection_lp_norm(0, np.inf).norm_estimate == pytest.approx(1.0, abs=1e-9)


def test_projection_norm_interpolation_bounds():
    inf = projection_lp_norm(3, np.inf).norm_estimate
    one = projection_lp_norm(3, 1.0).norm_estimate
    mid = projection_lp_norm(3, 3.0)
    assert mid.method == "power-iteration" and "lower_bound" in mid.flags
    assert 1 - 1e-10 <= mid.norm_estimate <= inf ** (1 / 3) * one ** (2 / 3) + 1e-9
    assert inf >= 1 - 1e-10


def test_projection_norm_patch_at_least_element():
    patch = projection_lp_norm(3, np.inf, CROSS, 4).norm_estimate
    assert patch >= 1 - 1e-10


# --- discrete dual norm --------------------------------------------------------

@pytest.fixture(scope="module")
def pressure_t0():
    return build_pressure_space(T0, 3)


def test_dual_norm_p2_is_l2(pressure_t0, rng):
    q = pressure_t0.function(rng.normal(size=pressure_t0.dim))
    val, _ = discrete_dual_norm(q, 2.0)
    assert val == pytest.approx(np.linalg.norm(q.coef), rel=1e-9)


@pytest.mark.parametrize("p", [1.5, 3.0, 4.0])
def test_dual_norm_holder_and_projection_bound(p, pressure_t0):
    rng = np.random.default_rng(int(p * 10))
    pd = p / (p - 1)
    delta_inf = projection_lp_norm(3, np.inf).norm_estimate
    # Riesz-Thorin with equal L^1 and L^inf norms bounds Delta(N, p)
    delta = delta_inf ** abs(1 - 2 / p)
    for _ in range(10):
        q = pressure_t0.function(rng.normal(size=pressure_t0.dim))
        val, _ = discrete_dual_norm(q, p)
        qp = quadrature_lp(q, pd)
        assert val <= qp * (1 + 1e-9)
        assert qp <= delta * val


def test_dual_norm_constrained_space(rng):
    Q = build_pressure_space(CROSS, 3)
    q = Q.function(Q.basis_matrix @ rng.normal(size=Q.dim))
    val, _ = discrete_dual_norm(q, 3.0)
    assert 0 < val <= quadrature_lp(q, 1.5) * (1 + 1e-9)


def test_dual_norm_errors(pressure_t0):
    with pytest.raises(ValueError):
        discrete_dual_norm(pressure_t0.function(), 3.0)
    with pytest.raises(ValueError):
        discrete_dual_norm(pressure_t0.function(np.ones(pressure_t0.dg_dim)), 1.0)


# --- general p -----------------------------------------------------------

def test_general_p_recovers_p2():
    r = infsup_general_p_upper(T0, 4, 2.0)
    assert r.kind == "upper_estimate"
    assert r.beta == pytest.approx(infsup_p2(T0, 4).beta, rel=1e-4)


@pytest.mark.slow
def test_general_p4_trend():
    betas = [infsup_general_p_upper(T0, N, 4.0).beta for N in (4, 6, 8)]
    assert all(b > 0 for b in betas)
    assert betas[0] >= betas[1] >= betas[2]
    assert betas[0] / betas[-1] < (8 / 4) ** 0.75


def test_general_p_upper_bounds_lower_exponent():
    r = infsup_general_p_upper(T0, 4, 1.5, starts=2)
    assert 0 < r.beta <= 1
