"""Inf-sup constants, L^p norms of the L^2 projection onto (constrained)
DG spaces, the singular-patch function b_a, and the discrete dual norm."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import scipy.optimize as sopt
import scipy.sparse as sp

from .femspace import (
    FEFunction,
    Geometry,
    PressureSpace,
    QuadGroup,
    assemble_divergence,
    assemble_h1_gram,
    build_pressure_space,
    build_velocity_space,
    plain_dg,
    quad_groups,
)
from .linalg import dense_gen_eig_min, factorize, smallest_gen_eig
from .mesh import Mesh, check_mesh_conditions, classify_vertices, xi_mesh
from .polytools import (
    REF_VERTICES,
    composite_rule,
    dubiner,
    jacobi_table,
    ref_to_bary,
    triangle_quadrature,
)

log = logging.getLogger(__name__)

CSV_HEADER = "kind,N,p,value,xi_T,iterations,flags"


class UnsupportedMeshError(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionNormReport:
    N: int
    p: float
    norm_estimate: float
    method: str
    iterations: int = 0
    flags: str = ""

    def csv_row(self) -> str:
        return f"projnorm_{self.method},{self.N},{self.p!r},{self.norm_estimate!r},,{self.iterations},{self.flags}"


@dataclass(frozen=True)
class InfSupReport:
    N: int
    p: float
    beta: float
    kind: str
    xi_T: float
    iterations: int = 0
    flags: str = ""

    def csv_row(self) -> str:
        return f"{self.kind},{self.N},{self.p!r},{self.beta!r},{self.xi_T!r},{self.iterations},{self.flags}"

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Inf-sup at p = 2
# ---------------------------------------------------------------------------

@dataclass
class _InfSupSystem:
    V: object
    Q: PressureSpace
    A: sp.csr_matrix  # Gram matrix on free velocity DOFs
    BZ: np.ndarray  # Z^T B restricted to free DOFs, dense (nq, nv)
    Mq: np.ndarray  # Z^T Z

    def schur(self) -> np.ndarray:
        F = factorize(self.A.tocsc())
        X = F.solve(self.BZ.T)
        S = self.BZ @ X
        return 0.5 * (S + S.T)


def _infsup_system(m: Mesh, N: int, seminorm: bool = False) -> _InfSupSystem:
    V = build_velocity_space(m, N, with_bc=True)
    Q = build_pressure_space(m, N - 1)
    free = V.free
    A = assemble_h1_gram(V, seminorm=seminorm)[free][:, free]
    Z = Q.basis_matrix
    BZ = (Z.T @ assemble_divergence(V, Q)[:, free]).toarray()
    return _InfSupSystem(V, Q, A.tocsr(), BZ, (Z.T @ Z).toarray())


def infsup_p2(m: Mesh, N: int, seminorm: bool = False, dense_check: bool = True,
              return_vector: bool = False):
    """beta^2 = smallest eigenvalue of Z^T B A^{-1} B^T Z against Z^T Z.

    A is the full W^{1,2} Gram matrix (or the seminorm part with `seminorm`).
    When `dense_check` the value is re-derived with LAPACK and compared.
    """
    sysm = _infsup_system(m, N, seminorm)
    S = sysm.schur()
    lam, x = smallest_gen_eig(S, sysm.Mq)
    flags = []
    if dense_check and S.shape[0] <= 2000:
        lam_ref, _ = dense_gen_eig_min(S, sysm.Mq)
        if abs(lam - lam_ref) > 1e-9 * abs(lam_ref):
            flags.append("dense_mismatch")
    xi = xi_mesh(classify_vertices(m))
    rep = InfSupReport(N, 2.0, float(np.sqrt(lam)), "exact_p2", xi, 0, ";".join(flags))
    return (rep, x, sysm) if return_vector else rep


# ---------------------------------------------------------------------------
# The singular-patch function b_a and constrained projections
# ---------------------------------------------------------------------------

def b_singular(m: Mesh, a: int, degree: int, check: bool = True) -> FEFunction:
    """b_a on DG^{degree}: sum_j (-1)^{j+1} P_degree^{(0,2)}(1 - 2 lambda_{K_j,a}) / |K_j| on K_j.

    The fixed sign index k of the defining formula is taken as 1; any choice
    only flips the overall sign.
    """
    cls = classify_vertices(m)
    if not cls[a].is_singular:
        raise ValueError(f"vertex {a} is not singular")
    Q = plain_dg(m, degree)
    rule = triangle_quadrature(3 * degree + 2)
    psi = dubiner(degree, rule.nodes)  # (nl, nq), orthonormal on the reference triangle
    lam = ref_to_bary(rule.nodes)
    coef = np.zeros(Q.dg_dim)
    areas = m.areas
    for j, t in enumerate(cls[a].fan, start=1):
        la = lam[:, list(m.triangles[t]).index(a)]
        vals = jacobi_table(degree, 0.0, 2.0, 1 - 2 * la)[degree] * (-1) ** (j + 1) / areas[t]
        # L^2(K) coefficients against psi / sqrt(detJ): sqrt(detJ) * int_ref vals * psi
        coef[Q.cell_dofs[t]] = np.sqrt(Q.geom.det[t]) * (psi * rule.weights) @ vals
    f = Q.function(coef)
    if check:
        expect = sum(1.0 / areas[t] for t in cls[a].fan)
        got = float(coef @ coef)
        if abs(got - expect) > 1e-10 * expect:
            raise ArithmeticError(f"||b_a||^2 = {got!r} differs from sum 1/|K_j| = {expect!r}")
    return f


def _l2_coefficients(Q: PressureSpace, f, degree: int) -> np.ndarray:
    g = quad_groups(Q.mesh, degree)[0]
    X = Q.geom.to_physical(g.cells, g.pts)
    T = Q.tables(g)
    wdet = g.weights[None] * Q.geom.det[g.cells][:, None]
    return np.einsum("eq,eq,eql->el", wdet, f(X), T).ravel()


def project_dg(m: Mesh, N: int, f, constrained: bool = False, quad_degree: int | None = None,
               enclosed: bool | None = None) -> FEFunction:
    """L^2 projection of `f` onto DG^{N-1}, or onto the constrained pressure space.

    Unconstrained: elementwise (the basis is orthonormal, so no solve).
    Constrained: subtract the b_a component on each singular patch, which
    needs disjoint patches; an added mean constraint is handled by the
    orthogonal projection onto the null-space basis.
    """
    k = N - 1
    deg = quad_degree if quad_degree is not None else 2 * k + 8
    Q = build_pressure_space(m, k, enclosed=enclosed) if constrained else plain_dg(m, k)
    c = _l2_coefficients(Q, f, deg)
    if not constrained:
        return Q.function(c)
    cls = Q.classification
    if not check_mesh_conditions(m, cls)["M1"]:
        raise UnsupportedMeshError("singular vertices with overlapping patches are not supported")
    for a in Q.singular_vertices:
        b = b_singular(m, a, k).coef
        c = c - (b @ c) / (b @ b) * b
    if Q.enclosed:
        Z = Q.basis_matrix
        c = Z @ np.linalg.solve((Z.T @ Z).toarray(), Z.T @ c)
    return Q.function(c)


def project_coefficients(Q: PressureSpace, c: np.ndarray) -> np.ndarray:
    """Orthogonal projection of DG coefficients onto the constrained space."""
    Z = Q.basis_matrix
    if Z.shape[0] == Z.shape[1]:
        return c
    return Z @ np.linalg.solve((Z.T @ Z).toarray(), Z.T @ c)


# ---------------------------------------------------------------------------
# Operator norms of the projection
# ---------------------------------------------------------------------------

def _lattice(n: int) -> np.ndarray:
    """(n+1)(n+2)/2 equispaced reference points, vertices included."""
    pts = [(-1 + 2 * i / n, -1 + 2 * j / n) for j in range(n + 1) for i in range(n + 1 - j)]
    return np.array(pts)


def _patch_rule(m: Mesh, fan, degree: int, levels: int):
    """Composite quadrature over the triangles of a fan, as a single group."""
    r = composite_rule(degree, levels)
    return QuadGroup(np.asarray(fan), r.nodes, r.weights)


def projection_linf_kernel(N: int, m: Mesh | None = None, a: int | None = None,
                           levels: int = 2, grid: int = 19):
    """max_x int |K(x, y)| dy for the projection kernel onto DG^N.

    Without a patch this is the single reference element; with (m, a) the
    kernel of the constrained projection on the fan of singular vertex a.
    Returns (value, argmax point).
    """
    if m is None:
        m = Mesh(REF_VERTICES.copy(), np.array([[0, 1, 2]]), ())
        fan = [0]
        b = None
    else:
        fan = list(classify_vertices(m)[a].fan)
        b = b_singular(m, a, N).coef
    Q = plain_dg(m, N)
    geom = Geometry(m)
    gy = _patch_rule(m, fan, N + 6, levels)
    Ty = Q.tables(gy)  # (nf, ny, nl)
    wy = gy.weights[None] * geom.det[fan][:, None]
    cells = np.asarray(fan)

    def lebesgue(pts):
        gx = QuadGroup(cells, pts, np.ones(len(pts)))
        Tx = Q.tables(gx)  # (nf, nx, nl)
        best = np.full(len(pts), -np.inf)
        for i, t in enumerate(cells):
            K = np.einsum("xl,eyl->xey", Tx[i], Ty)
            # the unconstrained kernel is block diagonal in the elements
            K[:, np.arange(len(cells)) != i, :] = 0.0
            if b is not None:
                bx = Tx[i] @ b[Q.cell_dofs[t]]
                by = np.einsum("eyl,el->ey", Ty, b[Q.cell_dofs[cells]])
                K = K - bx[:, None, None] * by[None] / (b @ b)
            val = np.einsum("xey,ey->x", np.abs(K), wy)
            best = np.maximum(best, val)
        return best

    pts = _lattice(grid)
    vals = lebesgue(pts)
    i = int(np.argmax(vals))
    # refine once around the argmax
    h = 2.0 / grid
    x0 = pts[i]
    loc = x0 + h * (_lattice(8) + 1.0) / 2.0 - h / 2.0
    loc = loc[(loc[:, 0] >= -1) & (loc[:, 1] >= -1) & (loc.sum(1) <= 0)]
    if len(loc):
        lv = lebesgue(loc)
        if lv.max() > vals[i]:
            return float(lv.max()), loc[int(np.argmax(lv))]
    return float(vals[i]), x0


def _power_iteration_norm(N: int, p: float, restarts: int, seed: int, max_iter: int = 200):
    """Lower bound for ||P||_{p->p} on the reference element by Boyd's iteration."""
    r = composite_rule(N + 6, 2)
    Phi = dubiner(N, r.nodes)  # (nl, nq)
    w = r.weights
    pd = p / (p - 1)
    rng = np.random.default_rng(seed)

    def P(v):
        return Phi.T @ (Phi @ (w * v))

    def norm(v, s):
        return float(np.sum(w * np.abs(v) ** s) ** (1 / s))

    best, iters = 0.0, 0
    for _ in range(restarts):
        q = rng.standard_normal(len(w))
        q /= norm(q, p)
        est = 0.0
        for it in range(1, max_iter + 1):
            g = P(q)
            new = norm(g, p)
            d = np.sign(g) * np.abs(g) ** (p - 1)
            z = P(d)
            q = np.sign(z) * np.abs(z) ** (pd - 1)
            q /= norm(q, p)
            iters += 1
            if abs(new - est) <= 1e-10 * new:
                est = new
                break
            est = new
        best = max(best, est, norm(P(q), p))
    return best, iters


def projection_lp_norm(N: int, p: float, m: Mesh | None = None, a: int | None = None,
                       restarts: int = 5, seed: int = 42) -> ProjectionNormReport:
    """Operator norm of the L^2 projection onto DG^N in L^p.

    p in {1, inf}: exact kernel value (a patch needs m and a). p = 2: 1.
    Otherwise a power-iteration lower bound on the single element.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    if p == 2:
        return ProjectionNormReport(N, 2.0, 1.0, "orthogonal")
    if np.isinf(p) or p == 1:
        val, _ = projection_linf_kernel(N, m, a)
        return ProjectionNormReport(N, float(p), val, "exact-kernel")
    if m is not None:
        raise ValueError("general p is estimated on the single element only")
    val, it = _power_iteration_norm(N, p, restarts, seed)
    return ProjectionNormReport(N, float(p), val, "power-iteration", it, "lower_bound")


# ---------------------------------------------------------------------------
# Discrete dual norm
# ---------------------------------------------------------------------------

class _DGEvaluator:
    """Values of DG functions at all quadrature points, with weights."""

    def __init__(self, Q: PressureSpace, degree: int):
        g = quad_groups(Q.mesh, degree)[0]
        T = Q.tables(g)  # (ne, nq, nl)
        ne, nq, nl = T.shape
        rows = np.repeat(np.arange(ne * nq), nl)
        cols = np.repeat(Q.cell_dofs[g.cells], nq, axis=0).ravel()
        self.E = sp.csr_matrix((T.ravel(), (rows, cols)), shape=(ne * nq, Q.dg_dim))
        self.w = (g.weights[None] * Q.geom.det[g.cells][:, None]).ravel()

    def norm(self, coef, s: float) -> float:
        return float(np.sum(self.w * np.abs(self.E @ coef) ** s) ** (1.0 / s))


def discrete_dual_norm(q: FEFunction, p: float, max_iter: int = 500, tol: float = 1e-8,
                       quad_degree: int | None = None):
    """sup over r in the pressure space of (q, r) / ||r||_p.

    Starts from the projection of |q|^{p'-2} q, which is the maximizer when
    no projection is needed, then climbs with L-BFGS. Norms use one fixed
    quadrature so the value never exceeds the quadrature ||q||_{p'}.
    Returns (value, iterations).
    """
    if not 1 < p < np.inf:
        raise ValueError("p must lie in (1, inf)")
    Q: PressureSpace = q.space
    c = q.coef
    if not np.any(c):
        raise ValueError("q must be nonzero")
    pd = p / (p - 1)
    ev = _DGEvaluator(Q, quad_degree if quad_degree is not None else 2 * Q.degree + 6)
    Z = Q.basis_matrix
    ZtZ = (Z.T @ Z).toarray()
    EZ = (ev.E @ Z).tocsr()
    qv = ev.E @ c
    rhs = Z.T @ c  # (q, Z y) = c . Z y by orthonormality
    # start: constrained projection of |q|^{p'-2} q
    s = np.sign(qv) * np.abs(qv) ** (pd - 1)
    y0 = np.linalg.solve(ZtZ, EZ.T @ (ev.w * s))

    def neg_ratio(y):
        rv = EZ @ y
        n = np.sum(ev.w * np.abs(rv) ** p) ** (1 / p)
        num = rhs @ y
        ratio = num / n
        dn = n ** (1 - p) * (EZ.T @ (ev.w * np.sign(rv) * np.abs(rv) ** (p - 1)))
        grad = rhs / n - num / n ** 2 * dn
        return -ratio, -grad

    start = -neg_ratio(y0)[0]
    res = sopt.minimize(neg_ratio, y0, jac=True, method="L-BFGS-B",
                        options={"maxiter": max_iter, "ftol": tol * 1e-2, "gtol": 1e-12})
    val = max(start, -float(res.fun))
    return val, int(res.nit)


def quadrature_lp(q: FEFunction, s: float, quad_degree: int | None = None) -> float:
    Q = q.space
    ev = _DGEvaluator(Q, quad_degree if quad_degree is not None else 2 * Q.degree + 6)
    return ev.norm(q.coef, s)


# ---------------------------------------------------------------------------
# Inf-sup for general p (upper estimate)
# ---------------------------------------------------------------------------

class _W1pNorm:
    """Dense evaluation of v and grad v at quadrature points for ||v||_{1,p}."""

    def __init__(self, V, degree: int):
        g = quad_groups(V.mesh, degree)[0]
        vals, grads = V.tables(g)
        ne, nq, nl = vals.shape
        npt = ne * nq
        d = V.vector_cell_dofs()[g.cells]
        full = V.full_dim
        self.w = (g.weights[None] * V.geom.det[g.cells][:, None]).ravel()
        Ev = np.zeros((2, npt, full))
        Eg = np.zeros((4, npt, full))
        pt = np.arange(npt).reshape(ne, nq)
        for c in range(2):
            cols = d[:, c * nl:(c + 1) * nl]
            for e in range(ne):
                np.add.at(Ev[c], (pt[e][:, None], cols[e][None, :]), vals[e])
                for j in range(2):
                    np.add.at(Eg[2 * c + j], (pt[e][:, None], cols[e][None, :]), grads[e, :, :, j])
        free = V.free
        self.Ev = Ev[:, :, free]
        self.Eg = Eg[:, :, free]

    def _blocks(self, x):
        return (np.einsum("cpn,n->pc", self.Ev, x), np.einsum("cpn,n->pc", self.Eg, x))

    def value(self, x, p):
        v, g = self._blocks(x)
        return float(np.sum(self.w * (np.linalg.norm(v, axis=1) ** p + np.linalg.norm(g, axis=1) ** p)))

    def norm(self, x, p):
        return self.value(x, p) ** (1.0 / p)

    def grad_hess(self, x, p, eps=1e-12):
        """Gradient and Hessian of (1/p) ||x||_{1,p}^p (Hessian regularized by eps)."""
        grad = np.zeros(len(x))
        H = np.zeros((len(x), len(x)))
        for E, f in ((self.Ev, self._blocks(x)[0]), (self.Eg, self._blocks(x)[1])):
            r = np.linalg.norm(f, axis=1)
            re = np.sqrt(r ** 2 + eps ** 2)
            a = self.w * re ** (p - 2)
            grad += np.einsum("p,pc,cpn->n", a, f, E)
            # |f|^{p-2} (I + (p-2) f f^T / |f|^2)
            k = self.w * (p - 2) * re ** (p - 4)
            H += np.einsum("p,cpn,cpm->nm", a, E, E)
            Ef = np.einsum("pc,cpn->pn", f, E)
            H += np.einsum("p,pn,pm->nm", k, Ef, Ef)
        return grad, H


def _dual_w1p(ell, W: _W1pNorm, p: float, x0, tol=1e-12, max_iter=100):
    """sup_v ell(v)/||v||_{1,p} via Newton on min (1/p)||v||^p - ell(v)."""
    def obj(x):
        return W.value(x, p) / p - ell @ x

    x = x0.copy()
    # rescale the start to the optimal multiple of itself
    lx = ell @ x
    if lx <= 0:
        x = -x
        lx = -lx
    x *= (lx / W.value(x, p)) ** (1.0 / (p - 1))
    f = obj(x)
    for it in range(1, max_iter + 1):
        g, H = W.grad_hess(x, p)
        g = g - ell
        step = np.linalg.solve(H, -g)
        t = 1.0
        while t > 1e-10:
            xn = x + t * step
            fn = obj(xn)
            if fn <= f + 1e-4 * t * (g @ step):
                break
            t *= 0.5
        dec = f - fn
        x, f = xn, fn
        if abs(dec) <= tol * abs(f) or np.linalg.norm(t * step) <= tol * np.linalg.norm(x):
            break
    ratio = (ell @ x) / W.norm(x, p)
    return float(ratio), x, it


def infsup_general_p_upper(m: Mesh, N: int, p: float, starts: int = 4, seed: int = 42,
                           perturbation: float = 0.3) -> InfSupReport:
    """Upper estimate of the W^{1,p} x L^{p'} inf-sup constant.

    Each candidate pressure q gives sup_v (div v, q) / (||v||_{1,p} ||q||_{p'}),
    an upper bound for the infimum; the dual norm is computed by a convex
    Newton minimization. Candidates: the p = 2 minimizer and random
    perturbations of it.
    """
    if not 1 < p < np.inf:
        raise ValueError("p must lie in (1, inf)")
    rep2, y2, sysm = infsup_p2(m, N, dense_check=False, return_vector=True)
    V, Q = sysm.V, sysm.Q
    W = _W1pNorm(V, 2 * N + 2)
    ev = _DGEvaluator(Q, 2 * Q.degree + 6)
    Z = Q.basis_matrix
    pd = p / (p - 1)
    rng = np.random.default_rng(seed)
    cands = [y2] + [y2 + perturbation * np.linalg.norm(y2) / np.sqrt(len(y2)) * rng.standard_normal(len(y2))
                    for _ in range(max(starts - 1, 0))]
    F = factorize(sysm.A.tocsc())
    best, total_it, flags = np.inf, 0, []
    for y in cands:
        ell = sysm.BZ.T @ y
        x0 = F.solve(ell)
        ratio, _, it = _dual_w1p(ell, W, p, x0)
        total_it += it
        qn = ev.norm(Z @ y, pd)
        best = min(best, ratio / qn)
    if not np.isfinite(best):
        flags.append("degraded")
    return InfSupReport(N, float(p), float(best), "upper_estimate", rep2.xi_T, total_it, ";".join(flags))


def reports_to_csv(reports, path) -> None:
    lines = [CSV_HEADER] + [r.csv_row() for r in reports]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
