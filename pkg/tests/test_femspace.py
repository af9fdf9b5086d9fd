import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from svlab.femspace import (
    QuadGroup, SizeError, SpaceError, alternating_sum, assemble_divergence,
    assemble_h1_gram, build_pressure_space, build_velocity_space, dim_G0_formula_check,
    left_null_space, lp_norm, plain_dg, quad_groups, verify_div_surjectivity,
)
from svlab.mesh import (
    G0, boundary_singular_mesh, classify_vertices, crossing_square, refined, unit_square_initial,
)
from svlab.polytools import dim_p

T0 = unit_square_initial()


def to_reference(V, cell, X):
    return (V.geom.jinv[cell] @ (X - V.geom.origin[cell]).T).T - 1.0


def vertex_field(V, fx, fy):
    """Coefficients of the P1 interpolant (exact for affine fields)."""
    c = np.zeros(V.full_dim)
    X = V.mesh.vertices
    c[:V.mesh.n_vertices] = fx(X)
    c[V.n_scalar:V.n_scalar + V.mesh.n_vertices] = fy(X)
    return c


def l2_interpolate(V, f, degree):
    """Coefficients of the L^2 projection of a vector field onto V (exact for members)."""
    g = quad_groups(V.mesh, degree)[0]
    vals, _ = V.tables(g)
    wdet = g.weights[None] * V.geom.det[g.cells][:, None]
    Ke = np.einsum("eq,eql,eqm->elm", wdet, vals, vals)
    d = V.cell_dofs
    n = V.n_scalar
    rows = np.repeat(d, d.shape[1], axis=1).ravel()
    cols = np.tile(d, (1, d.shape[1])).ravel()
    M = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
    F = f(V.geom.to_physical(g.cells, g.pts))
    out = np.zeros(2 * n)
    for c in range(2):
        rhs = np.zeros(n)
        np.add.at(rhs, d, np.einsum("eq,eq,eql->el", wdet, F[..., c], vals))
        out[c * n:(c + 1) * n] = sp.linalg.spsolve(M.tocsc(), rhs)
    return out


def dg_values(Q, values_per_cell):
    """DG^0 coefficients of a piecewise constant."""
    c = np.zeros(Q.dg_dim)
    for t, v in enumerate(values_per_cell):
        c[Q.cell_dofs[t][0]] = v / Q.vertex_values(t, 0)[0]
    return c


# --- dimensions -------------------------------------------------------------

def test_velocity_dims_t0():
    assert build_velocity_space(T0, 4, with_bc=False).dim == 162
    assert build_velocity_space(T0, 1, with_bc=False).dim == 18


@pytest.mark.parametrize("N", range(1, 7))
def test_velocity_dim_formula_and_elimination(N):
    V = build_velocity_space(T0, N, with_bc=True)
    nv, ne, nt = 9, 16, 8
    full = 2 * (nv + (N - 1) * ne + (N - 1) * (N - 2) // 2 * nt)
    assert V.full_dim == full
    assert full - V.dim == 2 * (3 + 2 * (N - 1))


def test_pressure_dims():
    for k in (0, 2, 3):
        assert build_pressure_space(T0, k).dim == 8 * dim_p(k)
    cr = crossing_square(0.0)
    Q = build_pressure_space(cr, 3)
    assert Q.dim == Q.dg_dim - 1
    enc = crossing_square(0.1, enclosed=True)
    assert classify_vertices(enc).singular == []
    Q = build_pressure_space(enc, 3)
    assert Q.enclosed and Q.dim == Q.dg_dim - 1


def test_degree_errors():
    with pytest.raises(SpaceError):
        build_velocity_space(T0, 0)
    with pytest.raises(SpaceError):
        build_pressure_space(T0, -1)


# --- continuity and boundary conditions ---------------------------------------

@given(seed=st.integers(0, 10_000), N=st.integers(1, 6))
def test_continuity_across_edges(seed, N):
    m = refined(T0, 1)
    V = build_velocity_space(m, N, with_bc=False)
    u = V.function(np.random.default_rng(seed).normal(size=V.full_dim))
    s = np.linspace(0.1, 0.9, 5)
    for t1 in range(m.n_triangles):
        for k in range(3):
            e = m.tri_edges[t1, k]
            others = [t for t in range(m.n_triangles) if t != t1 and e in m.tri_edges[t]]
            if not others or others[0] < t1:
                continue
            a, b = m.edges[e]
            X = m.vertices[a][None] * (1 - s)[:, None] + m.vertices[b][None] * s[:, None]
            v1 = u.evaluate(t1, to_reference(V, t1, X))
            v2 = u.evaluate(others[0], to_reference(V, others[0], X))
            assert np.max(np.abs(v1 - v2)) < 1e-11 * max(1.0, np.max(np.abs(v1)))


@pytest.mark.parametrize("N", [1, 3, 5])
def test_members_vanish_on_gamma0(N, rng):
    m = refined(T0, 1)
    V = build_velocity_space(m, N, with_bc=True)
    c = np.zeros(V.full_dim)
    c[V.free] = rng.normal(size=V.dim)
    u = V.function(c)
    s = np.linspace(0, 1, 5)
    for i, j, tag in m.boundary_edges:
        if tag != G0:
            continue
        t = next(t for t in range(m.n_triangles) if {i, j} <= set(m.triangles[t]))
        X = m.vertices[i][None] * (1 - s)[:, None] + m.vertices[j][None] * s[:, None]
        assert np.max(np.abs(u.evaluate(t, to_reference(V, t, X)))) < 1e-12


@given(seed=st.integers(0, 10_000))
def test_evaluation_affine_in_coefficients(seed):
    rng = np.random.default_rng(seed)
    V = build_velocity_space(T0, 3, with_bc=False)
    c1, c2 = rng.normal(size=(2, V.full_dim))
    a, b = rng.normal(size=2)
    pts = np.array([[-0.5, -0.5], [0.2, -0.6]])
    lhs = V.function(a * c1 + b * c2).evaluate(3, pts)
    rhs = a * V.function(c1).evaluate(3, pts) + b * V.function(c2).evaluate(3, pts)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_boundary_interpolation_exact_for_polynomials():
    V = build_velocity_space(T0, 4, with_bc=True)

    def f(X):
        return np.stack([X[..., 1] ** 3 - X[..., 0], X[..., 0] * X[..., 1] ** 2], -1)
    c = V.interpolate_boundary(f)
    u = V.function(c)
    s = np.linspace(0, 1, 7)
    for i, j, tag in T0.boundary_edges:
        if tag != G0:
            continue
        t = next(t for t in range(T0.n_triangles) if {i, j} <= set(T0.triangles[t]))
        X = T0.vertices[i][None] * (1 - s)[:, None] + T0.vertices[j][None] * s[:, None]
        assert np.allclose(u.evaluate(t, to_reference(V, t, X)), f(X), atol=1e-10)


# --- divergence matrix ---------------------------------------------------------

def test_divergence_of_constant_is_zero():
    V = build_velocity_space(T0, 4, with_bc=False)
    B = assemble_divergence(V, plain_dg(T0, 3))
    c = vertex_field(V, lambda X: np.ones(len(X)), lambda X: np.zeros(len(X)))
    assert np.max(np.abs(B @ c)) < 1e-14


def test_divergence_of_identity_field():
    m = refined(crossing_square(0.13), 1)
    V = build_velocity_space(m, 2, with_bc=False)
    Q = plain_dg(m, 0)
    B = assemble_divergence(V, Q)
    c = vertex_field(V, lambda X: X[:, 0], lambda X: X[:, 1])
    ind = dg_values(Q, np.ones(m.n_triangles))
    per_cell = np.array([ind[Q.cell_dofs[t]] @ (B @ c)[Q.cell_dofs[t]] for t in range(m.n_triangles)])
    assert np.allclose(per_cell, 2 * m.areas, atol=1e-14)


def test_divergence_redundant_assembly(rng):
    V = build_velocity_space(T0, 4, with_bc=False)
    Q = plain_dg(T0, 3)
    B = assemble_divergence(V, Q)
    u = V.function(rng.normal(size=V.full_dim))
    g = quad_groups(T0, 12)[0]
    G = u.grads(g)
    div = G[..., 0, 0] + G[..., 1, 1]
    ref = np.zeros(Q.dg_dim)
    wdet = g.weights[None] * V.geom.det[g.cells][:, None]
    np.add.at(ref, Q.cell_dofs[g.cells], np.einsum("eq,eq,eql->el", wdet, div, Q.tables(g)))
    assert np.max(np.abs(B @ u.coef - ref)) < 1e-12 * max(1.0, np.max(np.abs(ref)))


# --- structural checks -------------------------------------------------------

@pytest.mark.parametrize("N,expected", [(4, 0), (5, 1), (6, 3), (7, 6), (8, 10), (9, 15)])
def test_dim_g0_formula(N, expected):
    r = dim_G0_formula_check(N)
    assert r["computed"] == r["formula"] == expected


def test_rank_t0_and_crossing():
    r = verify_div_surjectivity(T0, 4)
    assert r["rank_B"] == r["dim_DG"] == r["dim_Q"] == 80 and r["equal"]
    r = verify_div_surjectivity(crossing_square(0.0), 4)
    assert r["rank_B"] == r["dim_DG"] - 1 and r["equal"]


def test_rank_enclosed_without_singular_vertices():
    m = crossing_square(0.1, enclosed=True)
    r = verify_div_surjectivity(m, 4)
    assert r["n_singular"] == 0
    assert r["rank_B"] == r["dim_DG"] - 1 and r["equal"]


@pytest.mark.parametrize("n", [1, 2, 3])
def test_rank_boundary_singular_fixtures(n):
    r = verify_div_surjectivity(boundary_singular_mesh(n), 4)
    assert r["equal"] and r["deficiency"] == r["n_singular"] >= 1


def test_left_null_vector_is_alternating_functional():
    m = crossing_square(0.0)
    V = build_velocity_space(m, 4, with_bc=True)
    Q = build_pressure_space(m, 3)
    B = assemble_divergence(V, plain_dg(m, 3))[:, V.free]
    null = left_null_space(B)
    assert null.shape[1] == 1
    row = Q.alternating_row(4)
    cos = abs(null[:, 0] @ row) / np.linalg.norm(row)
    assert cos == pytest.approx(1.0, abs=1e-9)
    # and it annihilates the constrained space
    assert np.max(np.abs(null[:, 0] @ Q.basis_matrix.toarray())) < 1e-10


def test_rank_size_cap():
    with pytest.raises(SizeError):
        verify_div_surjectivity(T0, 4, cap=10)


# --- pressure constraints ------------------------------------------------------

@given(seed=st.integers(0, 10_000))
def test_constrained_members_satisfy_constraints(seed):
    rng = np.random.default_rng(seed)
    for m in (crossing_square(0.0), boundary_singular_mesh(2), crossing_square(0.1, enclosed=True)):
        Q = build_pressure_space(m, 3)
        q = Q.function(Q.basis_matrix @ rng.normal(size=Q.dim))
        g = quad_groups(m, 10)[0]
        pts = np.vstack([g.pts, [[-1, -1], [1, -1], [-1, 1]]])
        sup = np.max(np.abs(q.values(QuadGroup(g.cells, pts, np.ones(len(pts))))))
        for a in Q.singular_vertices:
            assert abs(alternating_sum(q, a)) <= 1e-11 * sup
        if Q.enclosed:
            assert abs(Q.mean_row @ q.coef) <= 1e-11 * sup * m.areas.sum()


def test_alternating_sum_examples():
    m = crossing_square(0.0)
    Q = build_pressure_space(m, 0)
    fan = Q.classification[4].fan
    assert len(fan) == 4

    def on_fan(vals):
        per_cell = np.zeros(m.n_triangles)
        per_cell[list(fan)] = vals
        return Q.function(dg_values(Q, per_cell))
    assert abs(alternating_sum(on_fan([2.5] * 4), 4)) < 1e-14
    assert alternating_sum(on_fan([1, 0, 0, 0]), 4) == pytest.approx(-1, abs=1e-14)
    assert alternating_sum(on_fan([1, 2, 3, 4]), 4) == pytest.approx(2, abs=1e-14)
    with pytest.raises(SpaceError):
        alternating_sum(on_fan([1, 2, 3, 4]), 0)


# --- norms -------------------------------------------------------------------

def analytic(f, grad=None):
    if grad is not None:
        f.grad = grad
    return f


def test_lp_norm_examples():
    one = analytic(lambda X: np.ones(X.shape[:-1]))
    assert lp_norm(one, 3, mesh=T0) == pytest.approx(1.0, abs=1e-13)
    x = analytic(lambda X: X[..., 0])
    assert lp_norm(x, 2, mesh=T0) == pytest.approx(1 / math.sqrt(3), abs=1e-12)
    ident = analytic(lambda X: X.copy(), lambda X: np.broadcast_to(np.eye(2), X.shape[:-1] + (2, 2)))
    for p in (1.5, 2.0, 3.0):
        # Frobenius pointwise modulus |I| = sqrt(2), |Omega| = 1
        assert lp_norm(ident, p, "seminorm", mesh=T0) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_lp_norm_interpolated_polynomial():
    V = build_velocity_space(T0, 4, with_bc=False)
    u = V.function(l2_interpolate(V, lambda X: np.stack([X[..., 0] ** 2, X[..., 0] * X[..., 1]], -1), 10))
    assert lp_norm(u, 2) == pytest.approx(math.sqrt(14 / 45), abs=1e-10)
    assert lp_norm(u, 2, "seminorm") == pytest.approx(math.sqrt(2), abs=1e-10)
    assert lp_norm(u, 2, "full") == pytest.approx(math.sqrt(14 / 45 + 2), abs=1e-10)
    assert lp_norm(u, np.inf) == pytest.approx(math.sqrt(2), abs=1e-10)


def test_lp_norm_gram_consistency(rng):
    V = build_velocity_space(T0, 3, with_bc=False)
    c = rng.normal(size=V.full_dim)
    A = assemble_h1_gram(V)
    assert lp_norm(V.function(c), 2, "full") ** 2 == pytest.approx(c @ A @ c, rel=1e-12)


def test_lp_norm_errors():
    with pytest.raises(SpaceError):
        lp_norm(lambda X: X[..., 0], 2)
    with pytest.raises(SpaceError):
        lp_norm(lambda X: X[..., 0], 2, "seminorm", mesh=T0)
    Q = plain_dg(T0, 1)
    with pytest.raises(SpaceError):
        lp_norm(Q.function(np.ones(Q.dg_dim)), 2, "seminorm")


def test_dg_function_l2_norm_is_coefficient_norm(rng):
    Q = plain_dg(refined(T0, 1), 3)
    c = rng.normal(size=Q.dg_dim)
    assert lp_norm(Q.function(c), 2) == pytest.approx(np.linalg.norm(c), rel=1e-12)


def test_csv_export(tmp_path, rng):
    V = build_velocity_space(T0, 2, with_bc=False)
    c = rng.normal(size=V.full_dim)
    path = tmp_path / "u.csv"
    V.function(c).to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "index,value" and len(lines) == V.full_dim + 1
    back = np.array([float(r.split(",")[1]) for r in lines[1:]])
    assert np.array_equal(back, c)
