"""Hyperbolic surface model: Moebius maps, the genus-2 octagon group, meshing.

The surface is the quotient of the Poincare disk by the standard genus-2
octagon group (regular octagon, vertex angles pi/4, opposite-ish sides glued
by the word a b a' b' c d c' d').  Meshes are fans of the octagon refined by
hyperbolic midpoint subdivision, so boundary vertices stay on the geodesic
sides and side pairings remain exact isometries of the mesh boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LevelOutOfRange, NonEmbeddedMesh, UnsupportedGenus

MAX_LEVEL = 8

# Cayley map half-plane -> disk, z -> (z - i)/(z + i), det normalized to 1.
_CAYLEY = np.array([[1.0, -1.0j], [1.0, 1.0j]], dtype=complex) / np.sqrt(2.0j)
_CAYLEY_INV = np.linalg.inv(_CAYLEY)


class MoebiusTransform:
    """A 2x2 unit-determinant matrix acting on the disk or the half-plane."""

    __slots__ = ("mat", "model")

    def __init__(self, mat, model="disk", normalize=True):
        mat = np.asarray(mat, dtype=complex).reshape(2, 2)
        if normalize:
            det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
            if abs(det) < 1e-300:
                raise ValueError("singular Moebius matrix")
            mat = mat / np.sqrt(det)
        if model not in ("disk", "half-plane"):
            raise ValueError(f"unknown model {model!r}")
        self.mat = mat
        self.model = model

    # -- algebra ------------------------------------------------------------

    def __matmul__(self, other):
        if self.model != other.model:
            raise ValueError("cannot compose transforms in different models")
        return MoebiusTransform(self.mat @ other.mat, self.model, normalize=False)

    def inverse(self):
        a, b, c, d = self.mat.ravel()
        return MoebiusTransform(np.array([[d, -b], [-c, a]]), self.model, normalize=False)

    @property
    def det(self):
        a, b, c, d = self.mat.ravel()
        return a * d - b * c

    @property
    def trace(self):
        return self.mat[0, 0] + self.mat[1, 1]

    def is_hyperbolic(self):
        return abs(self.trace) > 2.0 + 1e-12

    # -- action -------------------------------------------------------------

    def __call__(self, z):
        a, b, c, d = self.mat.ravel()
        z = np.asarray(z, dtype=complex)
        num = a * z + b
        den = c * z + d
        out = np.where(np.abs(den) > 1e-300, num / np.where(den == 0, 1, den), np.inf)
        if out.ndim == 0:
            return complex(out)
        return out

    def deriv(self, z):
        """Complex derivative dg/dz = 1/(cz + d)^2 (unit determinant)."""
        c, d = self.mat[1, 0], self.mat[1, 1]
        z = np.asarray(z, dtype=complex)
        out = 1.0 / (c * z + d) ** 2
        if out.ndim == 0:
            return complex(out)
        return out

    # -- models -------------------------------------------------------------

    def to_model(self, model):
        if model == self.model:
            return self
        if model == "disk":  # currently half-plane
            return MoebiusTransform(_CAYLEY @ self.mat @ _CAYLEY_INV, "disk", normalize=False)
        return MoebiusTransform(_CAYLEY_INV @ self.mat @ _CAYLEY, "half-plane", normalize=False)

    def __repr__(self):
        return f"MoebiusTransform({self.mat.tolist()!r}, model={self.model!r})"

    @staticmethod
    def identity(model="disk"):
        return MoebiusTransform(np.eye(2), model, normalize=False)


def cayley_to_disk(w):
    """Point map half-plane -> disk."""
    w = np.asarray(w, dtype=complex)
    return (w - 1j) / (w + 1j)


def cayley_to_half_plane(z):
    z = np.asarray(z, dtype=complex)
    return 1j * (1 + z) / (1 - z)


def hyperbolic_distance(z, w):
    """Distance in the disk model (curvature -1)."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    num = 2.0 * np.abs(z - w) ** 2
    den = (1.0 - np.abs(z) ** 2) * (1.0 - np.abs(w) ** 2)
    return np.arccosh(1.0 + num / den)


def hyperbolic_midpoint(z, w):
    """Midpoint of the geodesic segment [z, w] in the disk model."""
    z = complex(z)
    w = complex(w)
    # move z to the origin
    wp = (w - z) / (1.0 - np.conj(z) * w)
    rho = abs(wp)
    if rho < 1e-15:
        return z
    half = math.tanh(0.5 * math.atanh(rho))
    mp = wp / rho * half
    return (mp + z) / (1.0 + np.conj(z) * mp)


def density(z):
    """Hyperbolic area density 4/(1-|z|^2)^2 of the disk model."""
    z = np.asarray(z, dtype=complex)
    return 4.0 / (1.0 - np.abs(z) ** 2) ** 2


def dlog_density(z):
    """d/dz of log density, 2 zbar / (1 - |z|^2).  Exact, used for connections."""
    z = np.asarray(z, dtype=complex)
    return 2.0 * np.conj(z) / (1.0 - np.abs(z) ** 2)


def _translate_to_origin(z):
    return MoebiusTransform(np.array([[1.0, -z], [-np.conj(z), 1.0]]), "disk")


def _rotation(theta):
    h = 0.5 * theta
    return MoebiusTransform(np.array([[np.exp(1j * h), 0], [0, np.exp(-1j * h)]]), "disk", normalize=False)


def isometry_taking(z1, z2, w1, w2):
    """The disk isometry g with g(z1) = w1, g(z2) = w2.

    Requires d(z1,z2) = d(w1,w2); the orientation-preserving solution is unique.
    """
    A = _translate_to_origin(z1)
    A = _rotation(-np.angle(A(z2))) @ A
    B = _translate_to_origin(w1)
    B = _rotation(-np.angle(B(w2))) @ B
    return B.inverse() @ A


# ---------------------------------------------------------------------------
# Fuchsian group
# ---------------------------------------------------------------------------

_GEN_NAMES = ("a1", "b1", "a2", "b2")


@dataclass
class FuchsianGroup:
    """Genus-g surface group in the disk model with commutator relator."""

    genus: int
    generators: dict  # name -> MoebiusTransform
    relator: list  # list of generator names, upper case = inverse
    octagon: "Octagon | None" = None

    def element(self, word):
        """Evaluate a word (iterable of names, upper case for inverses)."""
        g = MoebiusTransform.identity("disk")
        for name in word:
            base = self.generators[name.lower()]
            g = g @ (base.inverse() if name[0].isupper() else base)
        return g

    def relator_residual(self):
        """Max-norm distance of the relator image from +-identity."""
        m = self.element(self.relator).mat
        return min(np.abs(m - np.eye(2)).max(), np.abs(m + np.eye(2)).max())

    def generator_list(self):
        return [self.generators[n] for n in _GEN_NAMES[: 2 * self.genus]]


@dataclass
class Octagon:
    """Geometry of the regular genus-2 octagon fundamental domain."""

    vertices: np.ndarray  # 8 complex corner positions
    side_partner: dict  # side index -> partner side index
    side_word: dict  # side index -> word (name list) of the map side -> partner
    side_map: dict  # side index -> MoebiusTransform taking side j onto partner
    circle_center: np.ndarray  # per-side geodesic circle centers
    circle_radius: np.ndarray

    def side_points(self, j):
        return self.vertices[j], self.vertices[(j + 1) % 8]

    def contains(self, z, tol=1e-12):
        z = complex(z)
        if abs(z) > abs(self.vertices[0]) + tol:
            return False
        for j in range(8):
            if abs(z - self.circle_center[j]) < self.circle_radius[j] - tol:
                return False
        return True

    def side_overrun(self, z):
        """Index of the most violated side circle, or -1 if inside all."""
        z = complex(z)
        depth = self.circle_radius - np.abs(z - self.circle_center)
        j = int(np.argmax(depth))
        return j if depth[j] > 1e-13 else -1


def bolza_group(genus=2):
    """The standard genus-2 regular-octagon surface group in the disk model.

    Returns a :class:`FuchsianGroup` whose four generators satisfy the
    commutator relator [a1,b1][a2,b2] = 1 to round-off.  Only genus 2 is
    provided.
    """
    if genus != 2:
        raise UnsupportedGenus(f"only the genus-2 octagon preset is available, got genus {genus}")

    R = math.acosh(3.0 + 2.0 * math.sqrt(2.0))
    r = math.tanh(R / 2.0)
    verts = np.array([r * np.exp(1j * (k * np.pi / 4.0)) for k in range(8)])

    # boundary word a b a' b' c d c' d' on sides S_0..S_7; letter x at side i,
    # inverse at side j: the pairing map takes directed side j onto reversed side i.
    letter_sides = {"a": (0, 2), "b": (1, 3), "c": (4, 6), "d": (5, 7)}
    raw = {}
    for name, (i, j) in letter_sides.items():
        vj0, vj1 = verts[j], verts[(j + 1) % 8]
        vi0, vi1 = verts[i], verts[(i + 1) % 8]
        raw[name] = isometry_taking(vj0, vj1, vi1, vi0)

    # commutator presentation: (a1, b1, a2, b2) = (a, b^-1, c, d^-1)
    gens = {
        "a1": raw["a"],
        "b1": raw["b"].inverse(),
        "a2": raw["c"],
        "b2": raw["d"].inverse(),
    }
    relator = ["a1", "b1", "A1", "B1", "a2", "b2", "A2", "B2"]

    # per-side pairing maps expressed as generator words
    side_partner = {}
    side_word = {}
    for name, (i, j) in letter_sides.items():
        side_partner[j] = i
        side_partner[i] = j
    word_of = {"a": ["a1"], "b": ["B1"], "c": ["a2"], "d": ["B2"]}
    inv_word = {"a": ["A1"], "b": ["b1"], "c": ["A2"], "d": ["b2"]}
    for name, (i, j) in letter_sides.items():
        side_word[j] = word_of[name]  # maps side j onto side i
        side_word[i] = inv_word[name]  # maps side i onto side j

    group = FuchsianGroup(genus=2, generators=gens, relator=relator)
    side_map = {j: group.element(side_word[j]) for j in range(8)}

    # geodesic circles carrying the sides
    centers = np.empty(8, dtype=complex)
    radii = np.empty(8)
    c_abs = (1.0 + r * r) / (2.0 * r * math.cos(np.pi / 8.0))
    for j in range(8):
        centers[j] = c_abs * np.exp(1j * ((j + 0.5) * np.pi / 4.0))
        radii[j] = math.sqrt(c_abs * c_abs - 1.0)

    group.octagon = Octagon(
        vertices=verts,
        side_partner=side_partner,
        side_word=side_word,
        side_map=side_map,
        circle_center=centers,
        circle_radius=radii,
    )
    return group


def walk_to_fundamental_domain(group, z, max_steps=200):
    """Map z into the octagon; returns (z0, word) with z = group.element(word)(z0)."""
    oct_ = group.octagon
    word = []
    z = complex(z)
    for _ in range(max_steps):
        j = oct_.side_overrun(z)
        if j < 0:
            return z, word
        # the tile across side j is the image of the octagon under the map
        # taking side partner(j) onto side j; undo it.
        back = oct_.side_map[j]  # maps side j onto partner(j)
        z = back(z)
        word = [w.swapcase() for w in reversed(oct_.side_word[j])] + word
    return z, word  # caller checks containment


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------


@dataclass
class EdgePairing:
    edge: tuple  # directed vertex pair (i, j) on the boundary
    partner: tuple  # (k, l) with k = g(i), l = g(j)
    word: list  # generator word of g
    residual: float = 0.0


@dataclass
class VertexOrbit:
    rep: int
    members: list  # vertex indices, rep first
    words: dict  # vertex -> word taking rep to vertex


@dataclass
class SurfaceMesh:
    vertices: np.ndarray  # complex positions in the disk
    triangles: np.ndarray  # (nt, 3) int, counterclockwise
    pairings: list  # EdgePairing records, one per boundary edge
    density: np.ndarray  # per-vertex hyperbolic density
    level: int
    group: FuchsianGroup
    orbits: list = field(default_factory=list)  # boundary VertexOrbit records
    boundary_side: dict = field(default_factory=dict)  # boundary vertex -> side index

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def euclidean_areas(self):
        v = self.vertices
        t = self.triangles
        p, q, r = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        return 0.5 * np.imag(np.conj(q - p) * (r - p))

    def hyperbolic_area(self, quad_split=3):
        """Area from analytic-density quadrature plus geodesic-side lens corrections."""
        total = 0.0
        v = self.vertices
        for tri in self.triangles:
            total += _triangle_density_integral(v[tri[0]], v[tri[1]], v[tri[2]], quad_split)
        oct_ = self.group.octagon
        for pr in self.pairings:
            i, j = pr.edge
            side = self.boundary_side.get(i)
            if side is None or side != self.boundary_side.get(j):
                side = self._edge_side(i, j)
            total -= _lens_density_integral(
                v[i], v[j], oct_.circle_center[side], oct_.circle_radius[side]
            )
        return total

    def _edge_side(self, i, j):
        oct_ = self.group.octagon
        mid = hyperbolic_midpoint(self.vertices[i], self.vertices[j])
        d = np.abs(np.abs(mid - oct_.circle_center) - oct_.circle_radius)
        return int(np.argmin(d))

    def to_json(self):
        doc = {
            "level": int(self.level),
            "vertices": [[float(z.real), float(z.imag)] for z in self.vertices],
            "triangles": [[int(i) for i in t] for t in self.triangles],
            "pairings": [
                {
                    "edge": [int(p.edge[0]), int(p.edge[1])],
                    "partner": [int(p.partner[0]), int(p.partner[1])],
                    "word": list(p.word),
                }
                for p in self.pairings
            ],
        }
        return doc

    @staticmethod
    def from_json(doc, group=None):
        group = group or bolza_group()
        verts = np.array([complex(x, y) for x, y in doc["vertices"]])
        tris = np.array(doc["triangles"], dtype=int)
        pairings = [
            EdgePairing(tuple(p["edge"]), tuple(p["partner"]), list(p["word"]))
            for p in doc["pairings"]
        ]
        mesh = SurfaceMesh(
            vertices=verts,
            triangles=tris,
            pairings=pairings,
            density=np.asarray(density(verts), dtype=float),
            level=int(doc["level"]),
            group=group,
        )
        _finalize_mesh(mesh)
        return mesh


def _triangle_density_integral(p, q, r, split=2):
    """Integral of the hyperbolic density over a straight triangle.

    Midpoint rule on a 4^split uniform refinement; the density is evaluated
    analytically at the quadrature nodes.
    """
    n = 2 ** split
    area = 0.5 * abs(np.imag(np.conj(q - p) * (r - p)))
    cell = area / (n * n)
    total = 0.0
    e1 = (q - p) / n
    e2 = (r - p) / n
    for a in range(n):
        for b in range(n - a):
            z0 = p + a * e1 + b * e2
            c_up = z0 + (e1 + e2) / 3.0
            total += float(density(c_up)) * cell
            if a + b < n - 1:
                c_dn = z0 + (2.0 * (e1 + e2)) / 3.0
                total += float(density(c_dn)) * cell
    return total


_GAUSS8_X, _GAUSS8_W = np.polynomial.legendre.leggauss(8)


def _lens_density_integral(p, q, center, radius):
    """Density integral over the lens between chord [p, q] and its geodesic arc.

    The arc lies on the circle |z - center| = radius; the mesh triangle sticks
    out beyond the arc, so callers subtract this value.
    """
    tp = np.angle(p - center)
    tq = np.angle(q - center)
    dt = np.angle(np.exp(1j * (tq - tp)))  # short way
    if abs(dt) < 1e-15:
        return 0.0
    chord = q - p
    total = 0.0
    for xg, wg in zip(_GAUSS8_X, _GAUSS8_W):
        th = tp + 0.5 * (xg + 1.0) * dt
        e = np.exp(1j * th)
        denom = np.imag(np.conj(e) * chord)
        if abs(denom) < 1e-15:
            continue
        rho_chord = np.imag(np.conj(p - center) * chord) / denom
        r0, r1 = sorted((rho_chord, radius))
        for yg, vg in zip(_GAUSS8_X, _GAUSS8_W):
            rho = r0 + 0.5 * (yg + 1.0) * (r1 - r0)
            z = center + rho * e
            total += wg * vg * float(density(z)) * rho * 0.25 * abs(dt) * (r1 - r0)
    return total


def mesh_fundamental_domain(group, level):
    """Triangulate the octagon fundamental domain at the given refinement level.

    The initial fan (8 triangles from the origin) is refined ``level`` times by
    hyperbolic midpoint subdivision, giving 8 * 4^level triangles.  Boundary
    edges are paired through the octagon side maps.
    """
    if not (0 <= level <= MAX_LEVEL):
        raise LevelOutOfRange(f"level must be in [0, {MAX_LEVEL}], got {level}")
    oct_ = group.octagon
    verts = [0.0 + 0.0j] + list(oct_.vertices)
    tris = [(0, 1 + j, 1 + (j + 1) % 8) for j in range(8)]

    for _ in range(level):
        verts, tris = _subdivide(verts, tris)

    vertices = np.array(verts, dtype=complex)
    triangles = np.array(tris, dtype=int)

    areas = 0.5 * np.imag(
        np.conj(vertices[triangles[:, 1]] - vertices[triangles[:, 0]])
        * (vertices[triangles[:, 2]] - vertices[triangles[:, 0]])
    )
    if np.any(areas < 1e-14):
        raise NonEmbeddedMesh(f"degenerate triangle, min signed area {areas.min():.3e}")

    mesh = SurfaceMesh(
        vertices=vertices,
        triangles=triangles,
        pairings=[],
        density=np.asarray(density(vertices), dtype=float),
        level=level,
        group=group,
    )
    _build_pairings(mesh)
    _finalize_mesh(mesh)
    return mesh


def _subdivide(verts, tris):
    verts = list(verts)
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            verts.append(hyperbolic_midpoint(verts[i], verts[j]))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for (p, q, r) in tris:
        mpq = midpoint(p, q)
        mqr = midpoint(q, r)
        mrp = midpoint(r, p)
        out.extend([(p, mpq, mrp), (mpq, q, mqr), (mrp, mqr, r), (mpq, mqr, mrp)])
    return verts, out


def _boundary_edges(triangles):
    """Directed edges that appear in exactly one triangle (polygon boundary)."""
    count = {}
    for (p, q, r) in triangles:
        for e in ((p, q), (q, r), (r, p)):
            key = (min(e), max(e))
            count[key] = count.get(key, 0) + 1
    boundary = []
    for (p, q, r) in triangles:
        for e in ((p, q), (q, r), (r, p)):
            if count[(min(e), max(e))] == 1:
                boundary.append(e)
    return boundary


def _build_pairings(mesh):
    oct_ = mesh.group.octagon
    verts = mesh.vertices
    boundary = _boundary_edges(mesh.triangles)

    # classify boundary vertices by side circle
    side_of_edge = {}
    for e in boundary:
        mid = hyperbolic_midpoint(verts[e[0]], verts[e[1]])
        d = np.abs(np.abs(mid - oct_.circle_center) - oct_.circle_radius)
        side_of_edge[e] = int(np.argmin(d))
        if d.min() > 1e-9:
            raise NonEmbeddedMesh("boundary edge does not sit on an octagon side")

    for e in boundary:
        for v in e:
            mesh.boundary_side.setdefault(v, side_of_edge[e])

    # position lookup for partner matching
    index_of = {}
    boundary_vertices = sorted({v for e in boundary for v in e})
    for v in boundary_vertices:
        index_of[_poskey(verts[v])] = v

    pairings = []
    for e in boundary:
        side = side_of_edge[e]
        g = oct_.side_map[side]
        word = oct_.side_word[side]
        im0, im1 = g(verts[e[0]]), g(verts[e[1]])
        k = index_of.get(_poskey(im0))
        l = index_of.get(_poskey(im1))
        if k is None or l is None:
            raise NonEmbeddedMesh("side pairing image does not match a boundary vertex")
        res = max(abs(im0 - verts[k]), abs(im1 - verts[l]))
        pairings.append(EdgePairing(edge=e, partner=(k, l), word=list(word), residual=float(res)))
    mesh.pairings = pairings


def _poskey(z, digits=9):
    return (round(z.real, digits), round(z.imag, digits))


def _finalize_mesh(mesh):
    """Build vertex orbits with transport words from the edge pairings."""
    parent = {}

    def find(x):
        while parent.get(x, x) != x:
            parent[x] = parent.get(parent[x], parent[x])
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[max(rx, ry)] = min(rx, ry)

    edges = {}  # (v, w) -> word taking v to w
    for pr in mesh.pairings:
        for v, w in zip(pr.edge, pr.partner):
            union(v, w)
            edges.setdefault(v, {})[w] = list(pr.word)
            edges.setdefault(w, {})[v] = [s.swapcase() for s in reversed(pr.word)]

    groups = {}
    for v in edges:
        groups.setdefault(find(v), set()).add(v)

    orbits = []
    for rep in sorted(groups):
        members = groups[rep]
        words = {rep: []}
        frontier = [rep]
        while frontier:
            nxt = []
            for v in frontier:
                for w, word in edges.get(v, {}).items():
                    if w not in words:
                        words[w] = word + words[v]
                        nxt.append(w)
            frontier = nxt
        ordered = [rep] + sorted(m for m in members if m != rep)
        orbits.append(VertexOrbit(rep=rep, members=ordered, words=words))
    mesh.orbits = orbits


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    area: float
    area_error: float
    max_pairing_residual: float
    min_triangle_quality: float
    failures: list
    passed: bool

    def to_json(self):
        return {
            "area": self.area,
            "area_error": self.area_error,
            "max_pairing_residual": self.max_pairing_residual,
            "min_triangle_quality": self.min_triangle_quality,
            "failures": list(self.failures),
            "passed": self.passed,
        }


def validate_mesh(mesh, area_tol=None, pairing_tol=1e-9, quality_tol=1e-3):
    """Check Gauss-Bonnet area, pairing isometry residuals, triangle quality."""
    target = 4.0 * np.pi * (mesh.group.genus - 1)
    area = mesh.hyperbolic_area()
    area_err = abs(area - target) / target
    if area_tol is None:
        area_tol = 0.05 if mesh.level < 3 else 1e-3

    failures = []
    if area_err > area_tol:
        failures.append(f"area error {area_err:.3e} exceeds {area_tol:.1e}")

    verts = mesh.vertices
    max_res = 0.0
    for pr in mesh.pairings:
        g = mesh.group.element(pr.word)
        res = max(
            abs(g(verts[pr.edge[0]]) - verts[pr.partner[0]]),
            abs(g(verts[pr.edge[1]]) - verts[pr.partner[1]]),
        )
        if res > max_res:
            max_res = res
        if res > pairing_tol:
            failures.append(f"pairing residual {res:.3e} at edge {pr.edge}")

    p, q, r = (verts[mesh.triangles[:, k]] for k in range(3))
    a, b, c = np.abs(q - p), np.abs(r - q), np.abs(p - r)
    s = 0.5 * (a + b + c)
    area_e = np.sqrt(np.maximum(s * (s - a) * (s - b) * (s - c), 0.0))
    quality = 4.0 * np.sqrt(3.0) * area_e / (a * a + b * b + c * c)
    min_q = float(quality.min())
    if min_q < quality_tol:
        failures.append(f"triangle quality {min_q:.3e} below {quality_tol:.1e}")

    return ValidationReport(
        area=float(area),
        area_error=float(area_err),
        max_pairing_residual=float(max_res),
        min_triangle_quality=min_q,
        failures=failures,
        passed=not failures,
    )


def save_mesh(mesh, path):
    with open(path, "w") as fh:
        json.dump(mesh.to_json(), fh, sort_keys=True)


def load_mesh(path, group=None):
    with open(path) as fh:
        return SurfaceMesh.from_json(json.load(fh), group=group)
