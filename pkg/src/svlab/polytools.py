"""Polynomial machinery: Jacobi polynomials, the endpoint-interpolating 1D
polynomials, orthonormal and hierarchical bases on the triangle, and quadrature.

Reference triangle throughout: vertices (-1,-1), (1,-1), (-1,1); area 2.
Barycentric coordinates on it are

    lam0 = -(r + s)/2,   lam1 = (1 + r)/2,   lam2 = (1 + s)/2.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, roots_jacobi, roots_legendre

REF_VERTICES = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
REF_AREA = 2.0
# d(lam_k)/d(r, s)
BARY_GRAD = np.array([[-0.5, -0.5], [0.5, 0.0], [0.0, 0.5]])


class PolyDomainError(ValueError):
    """Arguments outside the domain of a polynomial construction."""


@dataclass(frozen=True)
class JacobiParams:
    N: int
    alpha: float
    beta: float

    def __post_init__(self):
        if self.N < 0 or self.alpha <= -1 or self.beta <= -1:
            raise PolyDomainError(f"invalid Jacobi parameters {self}")


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray  # (n,) on [-1,1] or (n, 2) reference-triangle coordinates
    weights: np.ndarray
    exactness_degree: int


# ---------------------------------------------------------------------------
# Jacobi polynomials
# ---------------------------------------------------------------------------

def jacobi_table(n: int, a: float, b: float, t) -> np.ndarray:
    """All P_k^{(a,b)}(t), k = 0..n, with P_k(1) = binom(k+a, k).

    Returns an array of shape (n+1,) + shape(t).
    """
    t = np.asarray(t, dtype=float)
    out = np.empty((n + 1,) + t.shape)
    out[0] = 1.0
    if n == 0:
        return out
    out[1] = 0.5 * (a - b + (a + b + 2.0) * t)
    ab = a + b
    for k in range(2, n + 1):
        c1 = 2.0 * k * (k + ab) * (2.0 * k + ab - 2.0)
        c2 = (2.0 * k + ab - 1.0) * (a * a - b * b)
        c3 = (2.0 * k + ab - 2.0) * (2.0 * k + ab - 1.0) * (2.0 * k + ab)
        c4 = 2.0 * (k + a - 1.0) * (k + b - 1.0) * (2.0 * k + ab)
        out[k] = ((c2 + c3 * t) * out[k - 1] - c4 * out[k - 2]) / c1
    return out


def jacobi_deriv_table(n: int, a: float, b: float, t) -> np.ndarray:
    """d/dt of jacobi_table(n, a, b, t)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros((n + 1,) + t.shape)
    if n >= 1:
        lower = jacobi_table(n - 1, a + 1.0, b + 1.0, t)
        for k in range(1, n + 1):
            out[k] = 0.5 * (k + a + b + 1.0) * lower[k - 1]
    return out


def jacobi_norm_sq(n: int, a: float, b: float) -> np.ndarray:
    """int_{-1}^{1} (1-t)^a (1+t)^b P_k^{(a,b)}(t)^2 dt for k = 0..n."""
    k = np.arange(n + 1, dtype=float)
    logh = ((a + b + 1.0) * np.log(2.0) - np.log(2.0 * k + a + b + 1.0)
            + gammaln(k + a + 1.0) + gammaln(k + b + 1.0)
            - gammaln(k + a + b + 1.0) - gammaln(k + 1.0))
    return np.exp(logh)


def jacobi_eval(p: JacobiParams, t: float) -> float:
    if abs(t) > 1.0:
        raise PolyDomainError(f"t={t} outside [-1, 1]")
    return float(jacobi_table(p.N, p.alpha, p.beta, t)[p.N])


# ---------------------------------------------------------------------------
# Endpoint-interpolating polynomials with rapid L^p decay
# ---------------------------------------------------------------------------

def zeta(m: int, N: int, alpha: float, t):
    """(1-t)^{m+1} (1+t)^m P_{N-2m-1}^{(alpha,alpha)}(t), scaled so that its
    m-th derivative at t = -1 is one."""
    if m < 0 or N < 2 * m + 1 or alpha <= 2 * m + 1.5:
        raise PolyDomainError(f"zeta needs N >= 2m+1 and alpha > 2m+3/2 (m={m}, N={N}, alpha={alpha})")
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(t) > 1.0):
        raise PolyDomainError("t outside [-1, 1]")
    n = N - 2 * m - 1
    P = jacobi_table(n, alpha, alpha, t)[n]
    Pm1 = jacobi_table(n, alpha, alpha, -1.0)[n]
    return (1.0 - t) ** (m + 1) * (1.0 + t) ** m * P / (2.0 ** (m + 1) * Pm1)


def zeta_integral(m: int, N: int, alpha: float) -> float:
    x, w = roots_legendre(N + 2)
    return float(w @ zeta(m, N, alpha, x))


def upsilon_tilde(N: int, alpha: float, t):
    """zeta_{1,N} corrected by a (1-t^2)^2 bump to have zero mean."""
    if N < 4 or alpha <= 3.5:
        raise PolyDomainError(f"upsilon_tilde needs N >= 4 and alpha > 7/2 (N={N}, alpha={alpha})")
    t = np.asarray(t, dtype=float)
    return zeta(1, N, alpha, t) - 15.0 / 16.0 * (1.0 - t * t) ** 2 * zeta_integral(1, N, alpha)


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

def gauss_legendre(n: int) -> QuadratureRule:
    if n < 1:
        raise PolyDomainError("need at least one point")
    x, w = roots_legendre(n)
    return QuadratureRule(np.asarray(x), np.asarray(w), 2 * n - 1)


@lru_cache(maxsize=None)
def _triangle_rule(degree: int):
    if degree == 0:
        return np.array([[-1.0 / 3.0, -1.0 / 3.0]]), np.array([REF_AREA])
    n = degree // 2 + 1
    xa, wa = roots_legendre(n)
    # the collapse s -> r-width (1-s)/2 is absorbed by the (1-s) Jacobi weight
    xb, wb = roots_jacobi(n, 1.0, 0.0)
    A, Bc = np.meshgrid(xa, xb, indexing="ij")
    r = 0.5 * (1.0 + A) * (1.0 - Bc) - 1.0
    s = Bc
    w = 0.5 * np.outer(wa, wb)
    pts = np.column_stack([r.ravel(), s.ravel()])
    return pts, w.ravel()


def triangle_quadrature(degree: int) -> QuadratureRule:
    """Collapsed Gauss-Jacobi rule on the reference triangle, exact to `degree`."""
    if degree < 0:
        raise PolyDomainError("degree must be nonnegative")
    pts, w = _triangle_rule(int(degree))
    return QuadratureRule(pts, w, int(degree))


def subdivide_reference(levels: int, corner: int | None = None):
    """Sub-triangles of the reference triangle as (k, 3, 2) vertex arrays.

    With ``corner`` given, refine geometrically toward that vertex: at each
    level the child touching the corner is split again. Otherwise split
    uniformly into 4**levels children.
    """
    tris = [REF_VERTICES.copy()]
    for _ in range(levels):
        new = []
        for i, T in enumerate(tris):
            if corner is not None and i != 0:
                new.append(T)
                continue
            m01, m12, m20 = (T[0] + T[1]) / 2, (T[1] + T[2]) / 2, (T[2] + T[0]) / 2
            kids = [np.array([T[0], m01, m20]), np.array([m01, T[1], m12]),
                    np.array([m20, m12, T[2]]), np.array([m12, m20, m01])]
            if corner is not None:
                kids.insert(0, kids.pop(corner))
            new.extend(kids)
        tris = new
    return np.array(tris)


def composite_rule(degree: int, levels: int, corner: int | None = None) -> QuadratureRule:
    """Reference-triangle rule assembled from sub-triangle rules."""
    base_pts, base_w = _triangle_rule(int(degree))
    lam = ref_to_bary(base_pts)
    pts, ws = [], []
    for T in subdivide_reference(levels, corner):
        pts.append(lam @ T)
        d1, d2 = T[1] - T[0], T[2] - T[0]
        area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
        ws.append(base_w * area / REF_AREA)
    return QuadratureRule(np.vstack(pts), np.concatenate(ws), int(degree))


def ref_to_bary(pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    r, s = pts[..., 0], pts[..., 1]
    return np.stack([-(r + s) / 2, (1 + r) / 2, (1 + s) / 2], axis=-1)


# ---------------------------------------------------------------------------
# Orthonormal (Dubiner) basis on the reference triangle
# ---------------------------------------------------------------------------

def dubiner_indices(N: int):
    return [(i, j) for i in range(N + 1) for j in range(N + 1 - i)]


def dubiner(N: int, pts, grad: bool = False):
    """Orthonormal basis of P_N on the reference triangle.

    Uses the collapsed product psi_ij = sqrt(2) Ptilde_i(a) (1-s)^i Ptilde_j^{(2i+1,0)}(s)
    written through the homogeneous Legendre recurrence, so the top vertex
    (s = 1) needs no special casing. Returns values (n, npts) and, if asked,
    gradients (n, npts, 2).
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    r, s = pts[:, 0], pts[:, 1]
    x = 1.0 + 2.0 * r + s
    t = 1.0 - s
    npts = len(r)
    # Q_i = t^i P_i(x/t) and its r,s derivatives
    Q = np.zeros((N + 1, npts))
    Qr = np.zeros((N + 1, npts))
    Qs = np.zeros((N + 1, npts))
    Q[0] = 1.0
    if N >= 1:
        Q[1], Qr[1], Qs[1] = x, 2.0, 1.0
    for i in range(1, N):
        # (i+1) Q_{i+1} = (2i+1) x Q_i - i t^2 Q_{i-1}
        Q[i + 1] = ((2 * i + 1) * x * Q[i] - i * t * t * Q[i - 1]) / (i + 1)
        Qr[i + 1] = ((2 * i + 1) * (2.0 * Q[i] + x * Qr[i]) - i * t * t * Qr[i - 1]) / (i + 1)
        Qs[i + 1] = ((2 * i + 1) * (Q[i] + x * Qs[i])
                     - i * (t * t * Qs[i - 1] - 2.0 * t * Q[i - 1])) / (i + 1)
    idx = dubiner_indices(N)
    vals = np.empty((len(idx), npts))
    grads = np.empty((len(idx), npts, 2)) if grad else None
    leg_h = jacobi_norm_sq(N, 0.0, 0.0)
    k = 0
    for i in range(N + 1):
        a = 2.0 * i + 1.0
        nj = N - i
        Pj = jacobi_table(nj, a, 0.0, s)
        hj = jacobi_norm_sq(nj, a, 0.0)
        if grad:
            dPj = jacobi_deriv_table(nj, a, 0.0, s)
        for j in range(nj + 1):
            # dr ds = (1-s)/2 da ds, so the s-weight is (1-s)^{2i+1} / 2
            cij = np.sqrt(2.0 / (leg_h[i] * hj[j]))
            vals[k] = cij * Q[i] * Pj[j]
            if grad:
                grads[k, :, 0] = cij * Qr[i] * Pj[j]
                grads[k, :, 1] = cij * (Qs[i] * Pj[j] + Q[i] * dPj[j])
            k += 1
    return (vals, grads) if grad else vals


def dim_p(N: int) -> int:
    return (N + 1) * (N + 2) // 2 if N >= 0 else 0


# ---------------------------------------------------------------------------
# Hierarchical H^1-conforming basis
# ---------------------------------------------------------------------------

# local edge k joins vertices EDGE_VERTS[k] and is opposite vertex k
EDGE_VERTS = ((1, 2), (2, 0), (0, 1))


@dataclass(frozen=True)
class SimplexBasis:
    """Vertex / edge / interior organized basis of P_N on the reference triangle.

    Ordering: 3 vertex functions, then (N-1) functions per local edge
    (edge-major), then (N-1)(N-2)/2 interior bubbles. Edge functions use the
    local orientation EDGE_VERTS[k][0] -> EDGE_VERTS[k][1]; function of
    degree d flips sign as (-1)^d under reversal.
    """
    N: int

    @property
    def dim(self) -> int:
        return dim_p(self.N)

    @property
    def n_edge(self) -> int:
        return max(self.N - 1, 0)

    @property
    def n_interior(self) -> int:
        return (self.N - 1) * (self.N - 2) // 2 if self.N >= 3 else 0

    def edge_slice(self, k: int) -> slice:
        return slice(3 + k * self.n_edge, 3 + (k + 1) * self.n_edge)

    @property
    def interior_slice(self) -> slice:
        return slice(3 + 3 * self.n_edge, self.dim)

    def edge_degrees(self) -> np.ndarray:
        return np.arange(2, self.N + 1)

    def eval(self, pts, grad: bool = False):
        """Values (dim, npts) and optionally reference gradients (dim, npts, 2)."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if self.N == 0:
            v = np.ones((1, len(pts)))
            return (v, np.zeros((1, len(pts), 2))) if grad else v
        lam = ref_to_bary(pts)  # (npts, 3)
        npts = len(pts)
        V = np.empty((self.dim, npts))
        G = np.empty((self.dim, npts, 2)) if grad else None
        for k in range(3):
            V[k] = lam[:, k]
            if grad:
                G[k] = BARY_GRAD[k]
        ne = self.n_edge
        for k, (ia, ib) in enumerate(EDGE_VERTS):
            if ne == 0:
                break
            la, lb = lam[:, ia], lam[:, ib]
            arg = lb - la
            P = jacobi_table(self.N - 2, 1.0, 1.0, arg)
            sl = self.edge_slice(k)
            V[sl] = la * lb * P
            if grad:
                dP = jacobi_deriv_table(self.N - 2, 1.0, 1.0, arg)
                ga, gb = BARY_GRAD[ia], BARY_GRAD[ib]
                g_arg = gb - ga
                prod = la * lb
                gprod = lb[:, None] * ga + la[:, None] * gb
                G[sl] = (gprod[None] * P[:, :, None]
                         + (prod[:, None] * g_arg)[None] * dP[:, :, None])
        if self.n_interior:
            bub = lam[:, 0] * lam[:, 1] * lam[:, 2]
            Dv = dubiner(self.N - 3, pts, grad=grad)
            sl = self.interior_slice
            if grad:
                Dv, Dg = Dv
                gbub = (BARY_GRAD[0] * (lam[:, 1] * lam[:, 2])[:, None]
                        + BARY_GRAD[1] * (lam[:, 0] * lam[:, 2])[:, None]
                        + BARY_GRAD[2] * (lam[:, 0] * lam[:, 1])[:, None])
                G[sl] = Dg * bub[None, :, None] + Dv[:, :, None] * gbub[None]
            V[sl] = Dv * bub
        return (V, G) if grad else V


def simplex_basis(N: int) -> SimplexBasis:
    if N < 0:
        raise PolyDomainError("N must be nonnegative")
    return SimplexBasis(N)


# ---------------------------------------------------------------------------
# Power-law fitting
# ---------------------------------------------------------------------------

def fit_decay_exponent(Ns, norms) -> float:
    """Least-squares slope of log(norm) against log(N)."""
    Ns = np.asarray(Ns, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if len(Ns) < 3:
        raise PolyDomainError("need at least three samples")
    if np.any(norms <= 0):
        raise PolyDomainError("norms must be positive")
    slope, _ = np.polyfit(np.log(Ns), np.log(norms), 1)
    return float(slope)
