"""Scott-Vogelius velocity and pressure spaces, assembly of the coupling
operator, norms, and the rank/dimension checks on the pressure space."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .mesh import G0, Mesh, classify_vertices
from .polytools import (
    REF_VERTICES,
    composite_rule,
    dim_p,
    dubiner,
    jacobi_table,
    simplex_basis,
    triangle_quadrature,
)
from .linalg import as_csr

RANK_TOL = 1e-9
DENSE_RANK_CAP = 6000


class SpaceError(ValueError):
    pass


class SizeError(SpaceError):
    pass


# ---------------------------------------------------------------------------
# Geometry and quadrature groups
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Geometry:
    mesh: Mesh

    @cached_property
    def origin(self):
        return self.mesh.vertices[self.mesh.triangles[:, 0]]

    @cached_property
    def jac(self):
        P = self.mesh.vertices[self.mesh.triangles]
        return np.stack([(P[:, 1] - P[:, 0]) / 2, (P[:, 2] - P[:, 0]) / 2], axis=2)  # (nt, 2, 2)

    @cached_property
    def det(self):
        J = self.jac
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    @cached_property
    def jinv(self):
        return np.linalg.inv(self.jac)

    def to_physical(self, cells, pts):
        """(len(cells), npts, 2) physical coordinates of reference points."""
        pts = np.asarray(pts)
        return self.origin[cells][:, None, :] + np.einsum("eij,qj->eqi", self.jac[cells], pts + 1.0)


@dataclass(frozen=True, eq=False)
class QuadGroup:
    cells: np.ndarray
    pts: np.ndarray
    weights: np.ndarray


def quad_groups(mesh: Mesh, degree: int, singular_point=None, levels: int = 0) -> list:
    """Quadrature groups covering the mesh.

    Cells having `singular_point` as a vertex get a composite rule refined
    `levels` times toward that vertex; all other cells share one rule.
    """
    rule = triangle_quadrature(degree)
    cells = np.arange(mesh.n_triangles)
    if singular_point is None or levels == 0:
        return [QuadGroup(cells, rule.nodes, rule.weights)]
    X = mesh.vertices[mesh.triangles]
    hit = np.linalg.norm(X - np.asarray(singular_point, dtype=float), axis=2) < 1e-13
    special = np.flatnonzero(hit.any(axis=1))
    groups = [QuadGroup(np.setdiff1d(cells, special), rule.nodes, rule.weights)]
    for corner in range(3):
        sel = special[hit[special, corner]]
        if len(sel):
            r = composite_rule(degree, levels, corner=corner)
            groups.append(QuadGroup(sel, r.nodes, r.weights))
    return [g for g in groups if len(g.cells)]


# ---------------------------------------------------------------------------
# Velocity space
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VelocitySpace:
    """Continuous piecewise P_N vector fields, Gamma_0 DOFs eliminated when with_bc."""
    mesh: Mesh
    N: int
    with_bc: bool = True

    def __post_init__(self):
        if self.N < 1:
            raise SpaceError("velocity degree must be at least 1")

    @cached_property
    def basis(self):
        return simplex_basis(self.N)

    @cached_property
    def geom(self) -> Geometry:
        return Geometry(self.mesh)

    @property
    def n_scalar(self) -> int:
        m, N = self.mesh, self.N
        return m.n_vertices + (N - 1) * m.n_edges + self.basis.n_interior * m.n_triangles

    @cached_property
    def _cell_maps(self):
        m, b = self.mesh, self.basis
        nt, ne = m.n_triangles, b.n_edge
        dofs = np.empty((nt, b.dim), dtype=np.int64)
        sign = np.ones((nt, b.dim))
        dofs[:, :3] = m.triangles
        off = m.n_vertices
        degs = b.edge_degrees()
        for k in range(3):
            sl = b.edge_slice(k)
            dofs[:, sl] = off + m.tri_edges[:, k][:, None] * ne + np.arange(ne)[None]
            flip = m.tri_edge_sign[:, k] < 0
            sign[np.ix_(flip, np.arange(sl.start, sl.stop))] = (-1.0) ** degs
        off += ne * m.n_edges
        ni = b.n_interior
        dofs[:, b.interior_slice] = off + np.arange(nt)[:, None] * ni + np.arange(ni)[None]
        return dofs, sign

    @property
    def cell_dofs(self):
        return self._cell_maps[0]

    @property
    def cell_sign(self):
        return self._cell_maps[1]

    @cached_property
    def g0_scalar_dofs(self) -> np.ndarray:
        if not self.with_bc:
            return np.zeros(0, dtype=np.int64)
        m, ne = self.mesh, self.basis.n_edge
        out = set()
        for i, j, t in m.boundary_edges:
            if t != G0:
                continue
            out.update((i, j))
            e = m.edge_index[(min(i, j), max(i, j))]
            out.update(m.n_vertices + e * ne + np.arange(ne))
        return np.array(sorted(out), dtype=np.int64)

    @cached_property
    def constrained(self) -> np.ndarray:
        """Vector DOF indices fixed by the Gamma_0 condition."""
        s = self.g0_scalar_dofs
        return np.concatenate([s, s + self.n_scalar])

    @cached_property
    def free(self) -> np.ndarray:
        mask = np.ones(2 * self.n_scalar, dtype=bool)
        mask[self.constrained] = False
        return np.flatnonzero(mask)

    @property
    def dim(self) -> int:
        return len(self.free)

    @property
    def full_dim(self) -> int:
        return 2 * self.n_scalar

    def vector_cell_dofs(self):
        d = self.cell_dofs
        return np.concatenate([d, d + self.n_scalar], axis=1)  # (nt, 2*nloc), component-major

    def tables(self, g: QuadGroup):
        """Signed values (ne, nq, nloc) and physical gradients (ne, nq, nloc, 2)."""
        V, G = self.basis.eval(g.pts, grad=True)
        sign = self.cell_sign[g.cells]
        vals = sign[:, None, :] * V.T[None]
        grads = np.einsum("lqr,erj->eqlj", G, self.geom.jinv[g.cells]) * sign[:, None, :, None]
        return vals, grads

    def function(self, coef=None) -> "FEFunction":
        return FEFunction(self, np.zeros(self.full_dim) if coef is None else np.asarray(coef, float))

    def interpolate_boundary(self, u_exact, n_gauss: int | None = None) -> np.ndarray:
        """Full coefficient vector holding Gamma_0 data of `u_exact`, zero elsewhere.

        Vertex DOFs take point values; edge DOFs are the H^1-seminorm
        projection of the remainder along each edge.
        """
        coef = np.zeros(self.full_dim)
        if not self.with_bc:
            return coef
        m, ne, ns = self.mesh, self.basis.n_edge, self.n_scalar
        X = m.vertices
        ng = n_gauss or 3 * self.N + 20
        s, w = np.polynomial.legendre.leggauss(ng)
        degs = np.arange(2, self.N + 1)
        # d/ds of ((1-s^2)/4) P^{(1,1)}_{k-2}(s) = -(k-1)/2 * P_{k-1}(s)
        leg = jacobi_table(self.N - 1, 0.0, 0.0, s)
        dphi = np.array([-(k - 1) / 2.0 * leg[k - 1] for k in degs]) if ne else np.zeros((0, ng))
        gram = (dphi * w) @ dphi.T
        for i, j, t in m.boundary_edges:
            if t != G0:
                continue
            lo, hi = min(i, j), max(i, j)
            for v in (lo, hi):
                coef[[v, v + ns]] = u_exact(X[v][None])[0]
            if not ne:
                continue
            xs = X[lo][None] * (1 - s)[:, None] / 2 + X[hi][None] * (1 + s)[:, None] / 2
            h = 1e-7 * np.linalg.norm(X[hi] - X[lo])
            tang = (X[hi] - X[lo]) / 2
            # d/ds of the data along the edge by the chain rule through u's gradient
            gdata = np.einsum("qij,j->qi", _grad_or_fd(u_exact, xs, h), tang)
            gdata -= (u_exact(X[hi][None])[0] - u_exact(X[lo][None])[0]) / 2
            c = np.linalg.solve(gram, (dphi * w) @ gdata)
            e = m.edge_index[(lo, hi)]
            idx = m.n_vertices + e * ne + np.arange(ne)
            coef[idx] = c[:, 0]
            coef[idx + ns] = c[:, 1]
        return coef


def _grad_or_fd(f, xs, h):
    grad = getattr(f, "grad", None)
    if grad is not None:
        return grad(xs)
    out = np.empty(xs.shape + (2,))
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        out[..., d] = (f(xs + e) - f(xs - e)) / (2 * h)
    return out


def build_velocity_space(m: Mesh, N: int, with_bc: bool = True) -> VelocitySpace:
    return VelocitySpace(m, N, with_bc)


# ---------------------------------------------------------------------------
# Pressure space
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PressureSpace:
    """DG^{k} with L^2-orthonormal element bases and optional constraints.

    Constraints: one alternating sum per singular vertex (when `singular`),
    and the zero mean (when `enclosed`). Members are Z @ c for the sparse
    constraint null-space basis Z.
    """
    mesh: Mesh
    degree: int
    enclosed: bool = False
    singular: bool = True

    @cached_property
    def geom(self) -> Geometry:
        return Geometry(self.mesh)

    @property
    def n_local(self) -> int:
        return dim_p(self.degree)

    @property
    def dg_dim(self) -> int:
        return self.n_local * self.mesh.n_triangles

    @cached_property
    def cell_dofs(self):
        nl = self.n_local
        return np.arange(self.mesh.n_triangles)[:, None] * nl + np.arange(nl)[None]

    @cached_property
    def classification(self):
        return classify_vertices(self.mesh)

    @cached_property
    def singular_vertices(self) -> list:
        return self.classification.singular if self.singular else []

    def tables(self, g: QuadGroup):
        """Values (ne, nq, nl) of the physical L^2-orthonormal basis."""
        V = dubiner(self.degree, g.pts)
        return V.T[None] / np.sqrt(self.geom.det[g.cells])[:, None, None]

    def vertex_values(self, cell: int, local_vertex: int) -> np.ndarray:
        V = dubiner(self.degree, REF_VERTICES[local_vertex][None])[:, 0]
        return V / np.sqrt(self.geom.det[cell])

    def alternating_row(self, a: int) -> np.ndarray:
        info = self.classification[a]
        row = np.zeros(self.dg_dim)
        for i, t in enumerate(info.fan, start=1):
            lv = list(self.mesh.triangles[t]).index(a)
            row[self.cell_dofs[t]] += (-1) ** i * self.vertex_values(t, lv)
        return row

    @cached_property
    def mean_row(self) -> np.ndarray:
        g = quad_groups(self.mesh, self.degree)[0]
        T = self.tables(g)
        return np.einsum("eql,q,e->el", T, g.weights, self.geom.det[g.cells]).ravel()

    @cached_property
    def constraints(self) -> np.ndarray:
        rows = [self.alternating_row(a) for a in self.singular_vertices]
        if self.enclosed:
            rows.append(self.mean_row)
        return np.array(rows).reshape(len(rows), self.dg_dim)

    @cached_property
    def basis_matrix(self) -> sp.csr_matrix:
        """Sparse Z whose columns span the constrained space."""
        C = self.constraints
        n = self.dg_dim
        if len(C) == 0:
            return sp.identity(n, format="csr")
        involved = np.flatnonzero(np.abs(C).max(axis=0) > 0)
        Ci = C[:, involved]
        _, R, perm = sla.qr(Ci, pivoting=True, mode="economic")
        rank = int(np.sum(np.abs(np.diag(R)) > RANK_TOL * abs(R[0, 0])))
        if rank < len(C):
            # drop dependent constraints
            keep = np.flatnonzero(np.abs(np.diag(sla.qr(Ci.T, pivoting=True, mode="economic")[1])) > RANK_TOL)
            C = C[keep[:rank]] if len(keep) >= rank else C[:rank]
            Ci = C[:, involved]
            _, R, perm = sla.qr(Ci, pivoting=True, mode="economic")
        piv = involved[perm[: len(C)]]
        rest = np.setdiff1d(np.arange(n), piv)
        elim = -np.linalg.solve(C[:, piv], C[:, rest])  # (c, n - c)
        eye = sp.csr_matrix((np.ones(len(rest)), (rest, np.arange(len(rest)))), shape=(n, len(rest)))
        ec = sp.coo_matrix(elim)
        dep = sp.csr_matrix((ec.data, (piv[ec.row], ec.col)), shape=(n, len(rest)))
        return as_csr(eye + dep)

    @property
    def dim(self) -> int:
        return self.basis_matrix.shape[1]

    def function(self, coef=None) -> "FEFunction":
        return FEFunction(self, np.zeros(self.dg_dim) if coef is None else np.asarray(coef, float))


def build_pressure_space(m: Mesh, Nm1: int, enclosed: bool | None = None,
                         singular: bool = True) -> PressureSpace:
    if Nm1 < 0:
        raise SpaceError("pressure degree must be nonnegative")
    if enclosed is None:
        enclosed = m.is_enclosed
    return PressureSpace(m, Nm1, bool(enclosed), singular)


def plain_dg(m: Mesh, degree: int) -> PressureSpace:
    return PressureSpace(m, degree, enclosed=False, singular=False)


# ---------------------------------------------------------------------------
# Discrete functions
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FEFunction:
    space: object
    coef: np.ndarray = field(repr=False)

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    @property
    def is_vector(self) -> bool:
        return isinstance(self.space, VelocitySpace)

    def values(self, g: QuadGroup):
        if self.is_vector:
            vals, _ = self.space.tables(g)
            U = self._components(g.cells)
            return np.einsum("eql,ecl->eqc", vals, U)
        T = self.space.tables(g)
        return np.einsum("eql,el->eq", T, self.coef[self.space.cell_dofs[g.cells]])

    def grads(self, g: QuadGroup):
        if not self.is_vector:
            raise SpaceError("gradients are only provided for the velocity space")
        _, grads = self.space.tables(g)
        return np.einsum("eqlj,ecl->eqcj", grads, self._components(g.cells))

    def _components(self, cells):
        d = self.space.cell_dofs[cells]
        ns = self.space.n_scalar
        return np.stack([self.coef[d], self.coef[d + ns]], axis=1)

    def evaluate(self, cell: int, ref_pts):
        g = QuadGroup(np.array([cell]), np.asarray(ref_pts, float).reshape(-1, 2), np.ones(len(ref_pts)))
        return self.values(g)[0]

    def to_csv(self, path) -> None:
        lines = ["index,value"] + [f"{i},{v!r}" for i, v in enumerate(self.coef.tolist())]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _coo(rows, cols, vals, shape):
    R = np.broadcast_to(rows[:, :, None], vals.shape)
    C = np.broadcast_to(cols[:, None, :], vals.shape)
    return sp.coo_matrix((vals.ravel(), (R.ravel(), C.ravel())), shape=shape)


def assemble_divergence(V: VelocitySpace, Q: PressureSpace, degree: int | None = None) -> sp.csr_matrix:
    """B[i, j] = int div(phi_j) psi_i over all (unconstrained) DG and full velocity DOFs."""
    deg = degree if degree is not None else V.N + Q.degree
    out = None
    for g in quad_groups(V.mesh, deg):
        _, grads = V.tables(g)
        T = Q.tables(g)
        wdet = g.weights[None] * V.geom.det[g.cells][:, None]
        # component c of the vector basis contributes d(phi)/dx_c
        Bx = np.einsum("eq,eqi,eql->eil", wdet, T, grads[..., 0])
        By = np.einsum("eq,eqi,eql->eil", wdet, T, grads[..., 1])
        vals = np.concatenate([Bx, By], axis=2)
        M = _coo(Q.cell_dofs[g.cells], V.vector_cell_dofs()[g.cells], vals, (Q.dg_dim, V.full_dim))
        out = M if out is None else out + M
    return as_csr(out)


def assemble_h1_gram(V: VelocitySpace, degree: int | None = None, seminorm: bool = False) -> sp.csr_matrix:
    """Gram matrix of the W^{1,2} inner product (grad u : grad v + u . v) on the full DOF set."""
    deg = degree if degree is not None else 2 * V.N
    out = None
    for g in quad_groups(V.mesh, deg):
        vals, grads = V.tables(g)
        wdet = g.weights[None] * V.geom.det[g.cells][:, None]
        K = np.einsum("eq,eqlj,eqmj->elm", wdet, grads, grads)
        if not seminorm:
            K = K + np.einsum("eq,eql,eqm->elm", wdet, vals, vals)
        z = np.zeros_like(K)
        blk = np.block([[K, z], [z, K]])
        d = V.vector_cell_dofs()[g.cells]
        M = _coo(d, d, blk, (V.full_dim, V.full_dim))
        out = M if out is None else out + M
    return as_csr(out)


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def _pointwise_abs(v, ndim_point):
    if v.ndim == ndim_point:
        return np.abs(v)
    return np.sqrt(np.sum(v.reshape(v.shape[:ndim_point] + (-1,)) ** 2, axis=-1))


def integrate_power(vals, g: QuadGroup, det, p: float) -> float:
    """sum over the group of int |vals|^p (pointwise Euclidean/Frobenius modulus)."""
    a = _pointwise_abs(vals, 2)
    return float(np.einsum("eq,q,e->", a ** p, g.weights, det[g.cells]))


def lp_norm(f, p: float, which: str = "L", mesh: Mesh | None = None, degree: int | None = None,
            groups=None) -> float:
    """L^p norm, W^{1,p} seminorm ('seminorm') or full W^{1,p} norm ('full').

    `f` is an FEFunction or an analytic field: a callable of points (..., 2)
    with an optional `.grad` attribute (required for the derivative norms).
    The full norm is (||f||_p^p + ||grad f||_p^p)^{1/p}; pointwise moduli are
    Euclidean for vectors and Frobenius for tensors. For p = inf the max is
    taken over quadrature nodes and element vertices.
    """
    if isinstance(f, FEFunction):
        mesh = f.mesh
        order = f.space.N if f.is_vector else f.space.degree + 1
        deg = degree if degree is not None else 2 * order + 4
        val = f.values
        grd = f.grads if f.is_vector else None
    else:
        if mesh is None:
            raise SpaceError("analytic fields need a mesh to integrate on")
        deg = degree if degree is not None else 12
        geom = Geometry(mesh)
        val = lambda g: f(geom.to_physical(g.cells, g.pts))  # noqa: E731
        grd = (lambda g: f.grad(geom.to_physical(g.cells, g.pts))) if hasattr(f, "grad") else None  # noqa: E731
    geom = Geometry(mesh)
    groups = groups or quad_groups(mesh, deg)
    parts = []
    if which in ("L", "full"):
        parts.append(val)
    if which in ("seminorm", "full"):
        if grd is None:
            raise SpaceError("derivative norm requested but no gradient available")
        parts.append(grd)
    if not parts:
        raise SpaceError(f"unknown norm kind {which!r}")
    if np.isinf(p):
        best = 0.0
        for ev in parts:
            for g in groups:
                pts = np.vstack([g.pts, REF_VERTICES])
                gg = QuadGroup(g.cells, pts, np.ones(len(pts)))
                best = max(best, float(_pointwise_abs(ev(gg), 2).max()))
        return best
    total = 0.0
    for ev in parts:
        for g in groups:
            total += integrate_power(ev(g), g, geom.det, p)
    return total ** (1.0 / p)


# ---------------------------------------------------------------------------
# Singular-vertex functional and structural checks
# ---------------------------------------------------------------------------

def alternating_sum(q: FEFunction, a: int) -> float:
    Q = q.space
    info = Q.classification[a]
    if not info.is_singular:
        raise SpaceError(f"vertex {a} is not singular")
    return float(Q.alternating_row(a) @ q.coef)


def numerical_rank(A, tol: float = RANK_TOL) -> int:
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    return int(np.sum(s > tol * s[0])) if s[0] > 0 else 0


def verify_div_surjectivity(m: Mesh, N: int, cap: int = DENSE_RANK_CAP) -> dict:
    """Numerical rank of (div v, r) on V^N_Gamma x DG^{N-1} against dim Q^{N-1}_Gamma."""
    V = build_velocity_space(m, N, with_bc=True)
    DG = plain_dg(m, N - 1)
    Q = build_pressure_space(m, N - 1)
    if max(V.dim, DG.dg_dim) > cap:
        raise SizeError(f"dense rank needs {max(V.dim, DG.dg_dim)} > cap {cap}")
    B = assemble_divergence(V, DG)[:, V.free]
    rank = numerical_rank(B)
    return {"rank_B": rank, "dim_Q": Q.dim, "dim_DG": DG.dg_dim, "equal": rank == Q.dim,
            "deficiency": DG.dg_dim - rank, "n_singular": len(Q.singular_vertices)}


def left_null_space(B, tol: float = RANK_TOL) -> np.ndarray:
    B = B.toarray() if sp.issparse(B) else np.asarray(B)
    U, s, _ = np.linalg.svd(B, full_matrices=True)
    r = int(np.sum(s > tol * s[0]))
    return U[:, r:]


def dim_G0_formula_check(N: int) -> dict:
    """Kernel dimension of v -> (v on the boundary, div v) on P_N(K)^2."""
    if N < 4:
        raise SpaceError("formula holds for N >= 4")
    n = dim_p(N)
    rows = []
    s, _ = np.polynomial.legendre.leggauss(N + 3)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        pts = REF_VERTICES[a][None] * (1 - s)[:, None] / 2 + REF_VERTICES[b][None] * (1 + s)[:, None] / 2
        V = dubiner(N, pts).T  # (npts, n)
        z = np.zeros_like(V)
        rows += [np.hstack([V, z]), np.hstack([z, V])]
    q = triangle_quadrature(2 * N)
    _, G = dubiner(N, q.nodes, grad=True)
    P = dubiner(N - 1, q.nodes)
    # coefficients of div v in the orthonormal P_{N-1} basis
    rows.append(np.hstack([(P * q.weights) @ G[:, :, 0].T, (P * q.weights) @ G[:, :, 1].T]))
    C = np.vstack(rows)
    computed = 2 * n - numerical_rank(C)
    formula = N * N / 2 - 7 * N / 2 + 6
    return {"computed": int(computed), "formula": int(round(formula))}
