"""Scott-Vogelius discretization of the p-Stokes system solved by Newton's method."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .femspace import (
    FEFunction,
    PressureSpace,
    VelocitySpace,
    assemble_divergence,
    build_pressure_space,
    build_velocity_space,
    quad_groups,
)
from .linalg import SingularMatrixError, as_csr, factorize
from .mesh import Mesh, refined, unit_square_initial

log = logging.getLogger(__name__)

SQ2 = np.sqrt(2.0)
ORIGIN = (0.0, 0.0)
CORNER_LEVELS = 3


class NewtonDivergenceError(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = list(history)


@dataclass(frozen=True)
class PowerLaw:
    p: float
    nu: float = 1.0
    eps_reg: float = 1e-10

    def __post_init__(self):
        if not 1.1 <= self.p <= 10:
            raise ValueError(f"p = {self.p} outside the supported range [1.1, 10]")
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.eps_reg < 0:
            raise ValueError("eps_reg must be nonnegative")

    @property
    def p_dual(self) -> float:
        return self.p / (self.p - 1)


# ---------------------------------------------------------------------------
# Pointwise tensors. Symmetric 2x2 tensors are handled in Mandel form
# m = (A11, A22, sqrt(2) A12), in which A:B = m_A . m_B.
# ---------------------------------------------------------------------------

def to_mandel(A):
    A = np.asarray(A, dtype=float)
    return np.stack([A[..., 0, 0], A[..., 1, 1], SQ2 * 0.5 * (A[..., 0, 1] + A[..., 1, 0])], axis=-1)


def from_mandel(m):
    m = np.asarray(m, dtype=float)
    off = m[..., 2] / SQ2
    return np.stack([np.stack([m[..., 0], off], -1), np.stack([off, m[..., 1]], -1)], -2)


def _power(r, e):
    """r**e with the value 0 at r = 0 (callers only use e > -1 against a factor r)."""
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** e
    return out


def _modulus(A):
    return np.sqrt(np.sum(np.asarray(A, dtype=float) ** 2, axis=(-2, -1)))


def stress_S(A, law: PowerLaw):
    """nu |A|^{p-2} A (Frobenius modulus), 0 at A = 0."""
    A = np.asarray(A, dtype=float)
    return law.nu * _power(_modulus(A), law.p - 2)[..., None, None] * A


def tensor_F(A, p: float):
    """|A|^{(p-2)/2} A, 0 at A = 0."""
    A = np.asarray(A, dtype=float)
    return _power(_modulus(A), (p - 2) / 2)[..., None, None] * A


def stress_S_mandel(m, law: PowerLaw):
    r = np.linalg.norm(m, axis=-1)
    return law.nu * _power(r, law.p - 2)[..., None] * m


def stress_jacobian(A, law: PowerLaw, mandel_input: bool = False):
    """dS/dA as a symmetric 3x3 matrix in Mandel form.

    nu |A|_e^{p-2} (Id + (p-2) A (x) A / |A|_e^2), |A|_e = sqrt(|A|^2 + eps^2).
    """
    m = np.asarray(A, dtype=float) if mandel_input else to_mandel(A)
    r2 = np.sum(m ** 2, axis=-1) + law.eps_reg ** 2
    if np.any(r2 == 0):
        if law.p < 2:
            raise ZeroDivisionError("Jacobian undefined at A = 0 for p < 2 without regularization")
        r2 = np.where(r2 == 0, 1.0, r2)
    scale = law.nu * r2 ** ((law.p - 2) / 2)
    eye = np.broadcast_to(np.eye(3), m.shape[:-1] + (3, 3))
    outer = m[..., :, None] * m[..., None, :] / r2[..., None, None]
    return scale[..., None, None] * (eye + (law.p - 2) * outer)


# ---------------------------------------------------------------------------
# Manufactured solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedSolution:
    label: str
    p: float

    def __post_init__(self):
        if self.label not in ("smooth", "rough"):
            raise ValueError(f"unknown solution {self.label!r}")

    @property
    def singular_point(self):
        return ORIGIN if self.label == "rough" else None

    def u(self, X):
        x, y = X[..., 0], X[..., 1]
        if self.label == "smooth":
            a, E, Y = np.expm1(x), np.exp(x), np.exp(y)
            return np.stack([-a * a * Y, 2 * a * E * Y], -1)
        r = np.hypot(x, y)
        s = _power(r, 0.01)
        return np.stack([s * y, -s * x], -1)

    def grad(self, X):
        """(..., 2, 2) with grad[i, j] = d u_i / d x_j; the rough case has the limit 0 at the origin."""
        x, y = X[..., 0], X[..., 1]
        if self.label == "smooth":
            a, E, Y = np.expm1(x), np.exp(x), np.exp(y)
            row0 = np.stack([-2 * a * E * Y, -a * a * Y], -1)
            row1 = np.stack([2 * E * (2 * E - 1) * Y, 2 * a * E * Y], -1)
            return np.stack([row0, row1], -2)
        r2 = x * x + y * y
        alpha = 0.01
        s = _power(np.sqrt(r2), alpha)
        k = np.where(r2 > 0, alpha * s / np.where(r2 > 0, r2, 1.0), 0.0)
        row0 = np.stack([k * x * y, k * y * y + s], -1)
        row1 = np.stack([-k * x * x - s, -k * x * y], -1)
        return np.stack([row0, row1], -2)

    def q(self, X):
        x, y = X[..., 0], X[..., 1]
        if self.label == "smooth":
            return np.exp(x + 2 * y)
        e = 2 / self.p - 1 + 0.01
        r = np.hypot(x, y)
        with np.errstate(divide="ignore"):
            val = np.where(r > 0, r ** e, np.inf if e < 0 else 0.0)
        return val * (1.0 if self.p >= 2 else 0.01)

    def sym_grad(self, X):
        G = self.grad(X)
        return 0.5 * (G + np.swapaxes(G, -1, -2))

    def S(self, X, law: PowerLaw):
        return stress_S(self.sym_grad(X), law)

    def F(self, X):
        return tensor_F(self.sym_grad(X), self.p)

    def velocity_field(self):
        f = lambda X: self.u(X)  # noqa: E731
        f.grad = self.grad
        return f


def manufactured(label: str, p: float) -> ManufacturedSolution:
    return ManufacturedSolution(label, float(p))


# ---------------------------------------------------------------------------
# Discrete problem
# ---------------------------------------------------------------------------

@dataclass
class PStokesSolution:
    u: FEFunction
    q: FEFunction
    newton_iterations: int
    residual_history: list = field(default_factory=list)
    converged: bool = True
    divergence_residual: float = 0.0
    state: np.ndarray | None = field(default=None, repr=False)


def _mandel_tables(V: VelocitySpace, g):
    """Mandel components of D(phi e_c) at quadrature points: (ne, nq, 3, 2*nloc)."""
    _, grads = V.tables(g)
    ne, nq, nl, _ = grads.shape
    G = np.zeros((ne, nq, 3, 2 * nl))
    gx, gy = grads[..., 0], grads[..., 1]
    G[:, :, 0, :nl] = gx
    G[:, :, 2, :nl] = gy / SQ2
    G[:, :, 1, nl:] = gy
    G[:, :, 2, nl:] = gx / SQ2
    return G


class PStokesProblem:
    """Residual and Jacobian of the discrete p-Stokes system.

    Unknowns are the free velocity DOFs and the pressure in null-space
    coordinates y (q = Z y). Gamma_0 values come from interpolating the exact
    solution; the load is L(v) = (S(D u), D v) - (div v, q) of the exact pair.
    """

    def __init__(self, V: VelocitySpace, Q: PressureSpace, sol: ManufacturedSolution, law: PowerLaw,
                 quad_degree: int | None = None):
        self.V, self.Q, self.sol, self.law = V, Q, sol, law
        deg = quad_degree if quad_degree is not None else 2 * V.N + 2
        self.groups = quad_groups(V.mesh, deg, sol.singular_point, CORNER_LEVELS if sol.singular_point else 0)
        self.tables = []
        vcd = V.vector_cell_dofs()
        for g in self.groups:
            G = _mandel_tables(V, g)
            wdet = g.weights[None] * V.geom.det[g.cells][:, None]
            X = V.geom.to_physical(g.cells, g.pts)
            self.tables.append((g, G, wdet, X, vcd[g.cells]))
        self.B = assemble_divergence(V, Q, degree=V.N + Q.degree)
        self.Z = Q.basis_matrix
        self.free = V.free
        self.u_bc = V.interpolate_boundary(sol.velocity_field())
        self.BZ_f = as_csr(self.Z.T @ self.B[:, self.free])
        self.load = self.assemble_load(law)

    # -- assembly --------------------------------------------------------
    def assemble_load(self, law: PowerLaw) -> np.ndarray:
        """L(phi_i) on all velocity DOFs."""
        out = np.zeros(self.V.full_dim)
        for g, G, wdet, X, dofs in self.tables:
            Sm = to_mandel(stress_S(self.sol.sym_grad(X), law))
            np.add.at(out, dofs, np.einsum("eq,eqk,eqkl->el", wdet, Sm, G))
        # (div v, q_exact) integrated with the same rules
        out -= self._div_load()
        return out

    def _div_load(self):
        out = np.zeros(self.V.full_dim)
        for g, G, wdet, X, dofs in self.tables:
            qx = self.sol.q(X)
            # div(phi e_c) = Mandel components 0 and 1 summed
            div = G[:, :, 0, :] + G[:, :, 1, :]
            np.add.at(out, dofs, np.einsum("eq,eq,eql->el", wdet, qx, div))
        return out

    def full_velocity(self, uf):
        u = self.u_bc.copy()
        u[self.free] = uf
        return u

    def operator(self, u_full, law: PowerLaw, jacobian: bool = True):
        """(S(D u), D phi_i) on all DOFs and, optionally, its Jacobian on free DOFs."""
        V = self.V
        res = np.zeros(V.full_dim)
        rows, cols, vals = [], [], []
        for g, G, wdet, X, dofs in self.tables:
            m = np.einsum("eqkl,el->eqk", G, u_full[dofs])
            Sm = stress_S_mandel(m, law)
            np.add.at(res, dofs, np.einsum("eq,eqk,eqkl->el", wdet, Sm, G))
            if jacobian:
                C = stress_jacobian(m, law, mandel_input=True)
                CG = np.einsum("eqkj,eqjm->eqkm", C, G)
                Ke = np.einsum("eq,eqkl,eqkm->elm", wdet, G, CG)
                n = dofs.shape[1]
                rows.append(np.repeat(dofs, n, axis=1).ravel())
                cols.append(np.tile(dofs, (1, n)).ravel())
                vals.append(Ke.ravel())
        if not jacobian:
            return res, None
        J = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(V.full_dim, V.full_dim)).tocsr()
        return res, J[self.free][:, self.free]

    def residual(self, x, law: PowerLaw | None = None, load=None, jacobian: bool = True):
        law = law or self.law
        load = self.load if load is None else load
        nf = len(self.free)
        uf, y = x[:nf], x[nf:]
        u = self.full_velocity(uf)
        op, J = self.operator(u, law, jacobian)
        Ru = op[self.free] - self.BZ_f.T @ y - load[self.free]
        Rq = -(self.Z.T @ (self.B @ u))
        R = np.concatenate([Ru, Rq])
        if not jacobian:
            return R, None
        K = sp.bmat([[J, -self.BZ_f.T], [-self.BZ_f, None]], format="csc")
        return R, K

    # -- solutions -------------------------------------------------------
    def pack(self, x) -> PStokesSolution:
        nf = len(self.free)
        u = self.V.function(self.full_velocity(x[:nf]))
        q = self.Q.function(self.Z @ x[nf:])
        div = float(np.linalg.norm(self.Z.T @ (self.B @ u.coef)))
        return PStokesSolution(u, q, 0, [], True, div)

    def zero_state(self):
        return np.zeros(len(self.free) + self.Z.shape[1])


def build_problem(m: Mesh, N: int, sol: ManufacturedSolution, law: PowerLaw,
                  quad_bump: int = 0) -> PStokesProblem:
    V = build_velocity_space(m, N, with_bc=True)
    Q = build_pressure_space(m, N - 1)
    return PStokesProblem(V, Q, sol, law, 2 * N + 2 + quad_bump)


def assemble_pstokes_rhs(V: VelocitySpace, Qp: PressureSpace, sol: ManufacturedSolution, law: PowerLaw,
                         quad_degree: int | None = None) -> np.ndarray:
    """L(phi_i) = (S(D u), D phi_i) - (div phi_i, q) for every velocity DOF."""
    return PStokesProblem(V, Qp, sol, law, quad_degree).load


def _linear_solve(prob: PStokesProblem, law: PowerLaw, load, x0):
    R, K = prob.residual(x0, law, load)
    try:
        F = factorize(K)
    except SingularMatrixError as exc:
        raise SingularMatrixError(f"singular saddle matrix (check boundary conditions): {exc}",
                                  exc.pivot) from exc
    return x0 - F.solve(R)


def solve_stokes_initializer(V=None, Qp=None, sol=None, problem: PStokesProblem | None = None) -> PStokesSolution:
    """(D u_N, D v) - (div v, q_N) = (D u, D v) - (div v, q), -(div u_N, r) = 0."""
    prob = problem or PStokesProblem(V, Qp, sol, PowerLaw(2.0, 1.0, 0.0))
    lin = PowerLaw(2.0, 1.0, 0.0)
    load = prob.assemble_load(lin) if prob.law != lin else prob.load
    x = _linear_solve(prob, lin, load, prob.zero_state())
    out = prob.pack(x)
    out.state = x
    return out


@dataclass(frozen=True)
class NewtonConfig:
    max_iters: int = 50
    rtol: float = 1e-8
    stol: float = 1e-8
    max_halvings: int = 30
    armijo: float = 1e-4


def newton_solve(V=None, Qp=None, sol=None, law: PowerLaw | None = None, cfg: NewtonConfig | None = None,
                 problem: PStokesProblem | None = None, x0=None) -> PStokesSolution:
    """Newton's method with residual-norm backtracking, started from the Stokes solution."""
    cfg = cfg or NewtonConfig()
    prob = problem or PStokesProblem(V, Qp, sol, law)
    law = prob.law
    x = solve_stokes_initializer(problem=prob).state if x0 is None else np.asarray(x0, float).copy()
    R, K = prob.residual(x)
    r = float(np.linalg.norm(R))
    hist = [r]
    ref = r
    scale = max(float(np.linalg.norm(prob.load[prob.free])), 1e-300)
    it = 0
    while True:
        if r <= cfg.rtol * ref or r <= 1e-14 * scale:
            break
        if it >= cfg.max_iters:
            raise NewtonDivergenceError(f"no convergence after {it} Newton steps", hist)
        try:
            step = -factorize(K).solve(R)
        except SingularMatrixError as exc:
            raise NewtonDivergenceError(f"singular Jacobian at step {it}: {exc}", hist) from exc
        t = 1.0
        for _ in range(cfg.max_halvings + 1):
            xn = x + t * step
            Rn, _ = prob.residual(xn, jacobian=False)
            rn = float(np.linalg.norm(Rn))
            if np.isfinite(rn) and rn <= (1 - cfg.armijo * t) * r:
                break
            t *= 0.5
        else:
            raise NewtonDivergenceError(f"line search failed at step {it}", hist)
        it += 1
        x = xn
        R, K = prob.residual(x)
        r = float(np.linalg.norm(R))
        hist.append(r)
        if np.linalg.norm(t * step) <= cfg.stol:
            break
    out = prob.pack(x)
    out.newton_iterations = it
    out.residual_history = hist
    out.state = x
    return out


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

def error_metrics(solu: PStokesSolution, sol: ManufacturedSolution, law: PowerLaw,
                  quad_degree: int | None = None) -> dict:
    """Relative errors: W^{1,p} velocity, L^{p'} stress, L^2 of F, L^{p'} pressure."""
    V = solu.u.space
    deg = quad_degree if quad_degree is not None else 2 * V.N + 6
    groups = quad_groups(V.mesh, deg, sol.singular_point, CORNER_LEVELS if sol.singular_point else 0)
    p, pd = law.p, law.p_dual
    acc = {k: [0.0, 0.0] for k in ("u", "S", "F", "q")}
    for g in groups:
        wdet = g.weights[None] * V.geom.det[g.cells][:, None]
        X = V.geom.to_physical(g.cells, g.pts)
        uh, Gh = solu.u.values(g), solu.u.grads(g)
        ue, Ge = sol.u(X), sol.grad(X)
        Dh = 0.5 * (Gh + np.swapaxes(Gh, -1, -2))
        De = 0.5 * (Ge + np.swapaxes(Ge, -1, -2))
        qh, qe = solu.q.values(g), sol.q(X)

        def add(key, err, ref, s):
            acc[key][0] += float(np.sum(wdet * err ** s))
            acc[key][1] += float(np.sum(wdet * ref ** s))

        e_u = np.linalg.norm(ue - uh, axis=-1) ** p + _modulus(Ge - Gh) ** p
        r_u = np.linalg.norm(ue, axis=-1) ** p + _modulus(Ge) ** p
        acc["u"][0] += float(np.sum(wdet * e_u))
        acc["u"][1] += float(np.sum(wdet * r_u))
        Se = stress_S(De, law)
        add("S", _modulus(Se - stress_S(Dh, law)), _modulus(Se), pd)
        Fe = tensor_F(De, p)
        add("F", _modulus(Fe - tensor_F(Dh, p)), _modulus(Fe), 2.0)
        add("q", np.abs(qe - qh), np.abs(qe), pd)
    expo = {"u": p, "S": pd, "F": 2.0, "q": pd}
    out, flags = {}, []
    for key, name in (("u", "e_u_w1p"), ("S", "e_S_lpprime"), ("F", "e_F_l2"), ("q", "e_q_lpprime")):
        num, den = (v ** (1 / expo[key]) for v in acc[key])
        if den > 0:
            out[name] = num / den
        else:
            out[name] = num
            flags.append(f"{name}_absolute")
    out["flags"] = ";".join(flags)
    return out


# ---------------------------------------------------------------------------
# Config-driven runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PStokesConfig:
    p: float = 2.0
    nu: float = 1.0
    degree: int = 4
    refinements: int = 0
    solution: str = "smooth"
    max_newton_iters: int = 50
    eps_reg: float = 1e-10
    quad_bump: int = 0

    @classmethod
    def from_json(cls, path) -> "PStokesConfig":
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def run_pstokes(cfg: PStokesConfig, mesh: Mesh | None = None):
    m = refined(mesh or unit_square_initial(), cfg.refinements)
    law = PowerLaw(cfg.p, cfg.nu, cfg.eps_reg)
    sol = manufactured(cfg.solution, cfg.p)
    prob = build_problem(m, cfg.degree, sol, law, cfg.quad_bump)
    res = newton_solve(problem=prob, cfg=NewtonConfig(max_iters=cfg.max_newton_iters))
    return res, error_metrics(res, sol, law), prob
