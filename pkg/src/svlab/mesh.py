"""Triangulations with tagged boundaries, vertex fans and singular-vertex geometry."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

SINE_TOL = 1e-12
G0, G1 = "g0", "g1"


class MeshError(ValueError):
    """Structurally invalid mesh (orientation, conformity, tags)."""


class VertexClass(str, Enum):
    INTERIOR = "interior"
    BOUNDARY_G0 = "boundary_g0_interior"
    BOUNDARY_OTHER = "boundary_other"


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (nv, 2)
    triangles: np.ndarray  # (nt, 3), counterclockwise
    boundary_edges: tuple = ()  # ((i, j, tag), ...)

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "boundary_edges",
                           tuple((int(i), int(j), str(t)) for i, j, t in self.boundary_edges))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        P = self.vertices[self.triangles]
        d1, d2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def _edge_data(self):
        # local edge k of a triangle joins vertices (k+1, k+2) mod 3, opposite vertex k
        T = self.triangles
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        pairs = T[:, loc]  # (nt, 3, 2)
        lo = pairs.min(axis=2)
        hi = pairs.max(axis=2)
        keys = np.stack([lo.ravel(), hi.ravel()], axis=1)
        edges, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        tri_edges = inv.reshape(-1, 3)
        # +1 when the local orientation runs from the lower to the higher global index
        sign = np.where(pairs[:, :, 0] < pairs[:, :, 1], 1, -1)
        return edges, tri_edges, sign, counts

    @property
    def edges(self) -> np.ndarray:
        return self._edge_data[0]

    @property
    def tri_edges(self) -> np.ndarray:
        return self._edge_data[1]

    @property
    def tri_edge_sign(self) -> np.ndarray:
        return self._edge_data[2]

    @cached_property
    def edge_index(self) -> dict:
        return {(int(a), int(b)): k for k, (a, b) in enumerate(self.edges)}

    @cached_property
    def boundary_tag(self) -> dict:
        """Map sorted vertex pair -> tag."""
        return {(min(i, j), max(i, j)): t for i, j, t in self.boundary_edges}

    @cached_property
    def vertex_triangles(self) -> list:
        out = [[] for _ in range(self.n_vertices)]
        for t, tri in enumerate(self.triangles):
            for v in tri:
                out[v].append(t)
        return out

    @property
    def is_enclosed(self) -> bool:
        return all(t == G0 for _, _, t in self.boundary_edges)

    def validate(self):
        if np.any(self.signed_areas <= 0):
            raise MeshError("triangles must have positive signed area (counterclockwise)")
        _, _, _, counts = self._edge_data
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: edge shared by more than two triangles")
        boundary = {tuple(e) for e, c in zip(self.edges.tolist(), counts) if c == 1}
        tagged = set(self.boundary_tag)
        if len(tagged) != len(self.boundary_edges):
            raise MeshError("boundary edge tagged more than once")
        if boundary != tagged:
            raise MeshError("tagged boundary edges do not match the mesh boundary")
        for _, _, t in self.boundary_edges:
            if t not in (G0, G1):
                raise MeshError(f"unknown boundary tag {t!r}")
        return self

    def with_tags(self, tagger) -> "Mesh":
        """Retag boundary edges with tagger(midpoint) -> 'g0' | 'g1'."""
        new = []
        for i, j, _ in self.boundary_edges:
            mid = 0.5 * (self.vertices[i] + self.vertices[j])
            new.append((i, j, tagger(mid)))
        return Mesh(self.vertices, self.triangles, tuple(new))

    def enclosed(self) -> "Mesh":
        return self.with_tags(lambda _: G0)

    def scaled(self, factor: float) -> "Mesh":
        return Mesh(self.vertices * factor, self.triangles, self.boundary_edges)


# ---------------------------------------------------------------------------
# Construction and refinement
# ---------------------------------------------------------------------------

def _square_boundary(vertices, triangles, tagger) -> tuple:
    m = Mesh(vertices, triangles, ())
    _, _, _, counts = m._edge_data
    out = []
    for (a, b), c in zip(m.edges.tolist(), counts):
        if c == 1:
            out.append((a, b, tagger(0.5 * (m.vertices[a] + m.vertices[b]))))
    return tuple(out)


def left_side_g0(mid) -> str:
    return G0 if abs(mid[0]) < 1e-12 else G1


def unit_square_initial() -> Mesh:
    """Unit square quartered at midpoints, each quarter cut along its anti-diagonal.

    Boundary edges on {x = 0} are tagged g0, all others g1.
    """
    verts = np.array([[i / 2, j / 2] for j in range(3) for i in range(3)])
    vid = lambda i, j: 3 * j + i  # noqa: E731
    tris = []
    for j in range(2):
        for i in range(2):
            bl, br, tl, tr = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
            tris += [(bl, br, tl), (br, tr, tl)]
    return Mesh(verts, tris, _square_boundary(verts, tris, left_side_g0)).validate()


def uniform_refine(m: Mesh) -> Mesh:
    """Split every triangle into four congruent children through edge midpoints."""
    nv = m.n_vertices
    mids = 0.5 * (m.vertices[m.edges[:, 0]] + m.vertices[m.edges[:, 1]])
    verts = np.vstack([m.vertices, mids])
    te = m.tri_edges + nv
    a, b, c = m.triangles.T
    m_bc, m_ca, m_ab = te[:, 0], te[:, 1], te[:, 2]
    kids = np.stack([
        np.stack([a, m_ab, m_ca], 1),
        np.stack([m_ab, b, m_bc], 1),
        np.stack([m_ca, m_bc, c], 1),
        np.stack([m_ab, m_bc, m_ca], 1),
    ], axis=1).reshape(-1, 3)
    bnd = []
    for i, j, t in m.boundary_edges:
        mid = nv + m.edge_index[(min(i, j), max(i, j))]
        bnd += [(i, mid, t), (mid, j, t)]
    return Mesh(verts, kids, tuple(bnd))


def refined(m: Mesh, levels: int) -> Mesh:
    for _ in range(levels):
        m = uniform_refine(m)
    return m


def crossing_square(delta: float = 0.0, enclosed: bool = False) -> Mesh:
    """Unit square cut by both diagonals; the center is shifted by `delta` in x.

    With delta = 0 the center is a singular interior vertex. Boundary: g0 on
    {x = 0} unless `enclosed`.
    """
    verts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5 + delta, 0.5]], dtype=float)
    tris = [(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    tagger = (lambda _: G0) if enclosed else left_side_g0
    return Mesh(verts, tris, _square_boundary(verts, tris, tagger)).validate()


def boundary_singular_mesh(n_elements: int) -> Mesh:
    """Meshes with a singular Gamma_0 boundary vertex abutting 1, 2 or 3 elements."""
    if n_elements == 1:
        # corner (0,0) of the initial square mesh, g0 on both adjacent sides
        m = unit_square_initial()
        return m.with_tags(lambda mid: G0 if min(abs(mid[0]), abs(mid[1])) < 1e-12 else G1).validate()
    if n_elements == 2:
        verts = np.array([[0, 0], [0.5, 0], [1, 0], [0.5, 1]], dtype=float)
        tris = [(0, 1, 3), (1, 2, 3)]
        tagger = lambda mid: G0 if abs(mid[1]) < 1e-12 else G1  # noqa: E731
        return Mesh(verts, tris, _square_boundary(verts, tris, tagger)).validate()
    if n_elements == 3:
        # re-entrant corner of an L-shape, g0 on the two edges meeting there
        verts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1]],
                         dtype=float)
        tris = [(0, 1, 3), (1, 2, 3), (0, 3, 5), (3, 4, 5), (0, 5, 7), (5, 6, 7)]

        def tagger(mid):
            on_pos_x = abs(mid[1]) < 1e-12 and mid[0] > 0
            on_neg_y = abs(mid[0]) < 1e-12 and mid[1] < 0
            return G0 if (on_pos_x or on_neg_y) else G1
        return Mesh(verts, tris, _square_boundary(verts, tris, tagger)).validate()
    raise ValueError("n_elements must be 1, 2 or 3")


def single_triangle_enclosed() -> Mesh:
    """One triangle with g0 everywhere: all three corners singular, sharing an element."""
    verts = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
    return Mesh(verts, [(0, 1, 2)], ((0, 1, G0), (1, 2, G0), (0, 2, G0))).validate()


# ---------------------------------------------------------------------------
# Vertex classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VertexInfo:
    cls: VertexClass
    fan: tuple  # triangle indices K_1..K_m, counterclockwise
    angles: tuple  # theta_1..theta_m
    is_singular: bool
    xi: float  # nan for vertices where xi is undefined


@dataclass(frozen=True)
class VertexClassification:
    mesh: Mesh
    info: tuple = field(repr=False)

    def __getitem__(self, a: int) -> VertexInfo:
        return self.info[a]

    @property
    def singular(self) -> list:
        return [a for a, v in enumerate(self.info) if v.is_singular]

    def cls(self, a: int) -> VertexClass:
        return self.info[a].cls


def _angle(p, q, r) -> float:
    """Angle at p of the triangle (p, q, r)."""
    u, v = q - p, r - p
    return float(np.arctan2(abs(u[0] * v[1] - u[1] * v[0]), u @ v))


def classify_vertices(m: Mesh) -> VertexClassification:
    m.validate()
    X = m.vertices
    bnd_nbrs: dict = {}
    for i, j, t in m.boundary_edges:
        bnd_nbrs.setdefault(i, []).append((j, t))
        bnd_nbrs.setdefault(j, []).append((i, t))
    info = []
    for a in range(m.n_vertices):
        tris = m.vertex_triangles[a]
        if not tris:
            raise MeshError(f"vertex {a} belongs to no triangle")
        # each triangle as (next, prev) neighbours in counterclockwise order about a
        links = {}
        for t in tris:
            tri = list(m.triangles[t])
            k = tri.index(a)
            links[t] = (tri[(k + 1) % 3], tri[(k + 2) % 3])
        by_first = {}
        for t, (b, _) in links.items():
            if b in by_first:
                raise MeshError(f"fan at vertex {a} is not a simple chain")
            by_first[b] = t
        if a in bnd_nbrs:
            nbrs = bnd_nbrs[a]
            if len(nbrs) != 2:
                raise MeshError(f"boundary vertex {a} must have exactly two boundary edges")
            starts = [t for t, (b, _) in links.items() if any(b == j for j, _ in nbrs)]
            if len(starts) != 1:
                raise MeshError(f"cannot locate fan start at boundary vertex {a}")
            start = starts[0]
            cls = VertexClass.BOUNDARY_G0 if all(t == G0 for _, t in nbrs) else VertexClass.BOUNDARY_OTHER
        else:
            start = min(tris)
            cls = VertexClass.INTERIOR
        fan = [start]
        while True:
            nxt = by_first.get(links[fan[-1]][1])
            if nxt is None or nxt == start:
                break
            fan.append(nxt)
        if len(fan) != len(tris):
            raise MeshError(f"fan at vertex {a} does not cover its triangles")
        angles = tuple(_angle(X[a], X[links[t][0]], X[links[t][1]]) for t in fan)
        if cls is VertexClass.INTERIOR and abs(sum(angles) - 2 * np.pi) > 1e-10 * 2 * np.pi:
            raise MeshError(f"angles at interior vertex {a} do not close")
        pair = [abs(np.sin(angles[i] + angles[i + 1])) for i in range(len(angles) - 1)]
        pair = [0.0 if v < SINE_TOL else v for v in pair]
        if cls is VertexClass.BOUNDARY_OTHER:
            info.append(VertexInfo(cls, tuple(fan), angles, False, float("nan")))
            continue
        singular = all(v == 0.0 for v in pair)
        xi = sum(pair)
        if cls is VertexClass.INTERIOR:
            wrap = abs(np.sin(angles[-1] + angles[0]))
            xi += 0.0 if wrap < SINE_TOL else wrap
        info.append(VertexInfo(cls, tuple(fan), angles, singular, float(xi)))
    return VertexClassification(m, tuple(info))


def xi_vertex(c: VertexClassification, a: int) -> float:
    v = c[a]
    if v.cls is VertexClass.BOUNDARY_OTHER:
        raise ValueError(f"xi is undefined at vertex {a} (not interior, not inside Gamma_0)")
    return v.xi


def xi_mesh(c: VertexClassification) -> float:
    vals = [v.xi for v in c.info if v.cls is not VertexClass.BOUNDARY_OTHER and not v.is_singular]
    return float(min(vals)) if vals else 1.0


def check_mesh_conditions(m: Mesh, c: VertexClassification) -> dict:
    sing = c.singular
    patches = [set(c[a].fan) for a in sing]
    m1 = all(patches[i].isdisjoint(patches[j])
             for i in range(len(patches)) for j in range(i + 1, len(patches)))
    m2 = True
    if m.is_enclosed:
        m2 = all(len(c[a].fan) == 2 for a in sing if c.cls(a) is VertexClass.BOUNDARY_G0)
    return {"M1": m1, "M2": m2, "M3": not sing}


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def write_mesh(m: Mesh, path) -> None:
    lines = ["# svlab mesh: v x y | t i j k (0-based, ccw) | b i j tag"]
    lines += [f"v {x!r} {y!r}" for x, y in m.vertices.tolist()]
    lines += [f"t {i} {j} {k}" for i, j, k in m.triangles.tolist()]
    lines += [f"b {i} {j} {t}" for i, j, t in m.boundary_edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    verts, tris, bnd = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "v":
                verts.append((float(parts[1]), float(parts[2])))
            elif parts[0] == "t":
                tris.append(tuple(int(p) for p in parts[1:4]))
            elif parts[0] == "b":
                bnd.append((int(parts[1]), int(parts[2]), parts[3]))
            else:
                raise MeshError(f"line {lineno}: unknown record {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise MeshError(f"line {lineno}: malformed record {raw!r}") from exc
    return Mesh(np.array(verts), np.array(tris), tuple(bnd)).validate()
