"""Discrete Dolbeault calculus on the quotient mesh.

Conformal flatness is used throughout: first-order operators are flat P1
Cauchy-Riemann stencils in the disk coordinate, and the hyperbolic metric
enters only through mass weights.  A field of weight (p, q) transforms under
a deck transformation g as value(g z) = g'(z)^-p conj(g'(z))^-q B_g value(z),
with B_g the bundle holonomy; identified boundary vertices share one reduced
degree of freedom through exactly these factors.

Inner products (density = hyperbolic area density, dA = Euclidean element):

    sections        int tr(f g*) density dA
    1-forms         int tr(a b*) dA
    weight (p, q)   int tr(a b*) density^(1-p-q) dA

With this normalization the adjoints of the deformation primitives close in
the same form the tensor formulas use them: (ad nu)* = density^-1 ad(nu*),
(mu d)* = -d* mu-bar.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import bundle as bundle_mod
from .errors import KindMismatch, SingularAssembly, SolverBreakdown
from .surface import density as density_fn
from .surface import dlog_density

# weight exponents (p, q); 2-forms are stored as coefficients of the
# Euclidean area element.
DEGREES = {
    "function": (0, 0),
    "(1,0)": (1, 0),
    "(0,1)": (0, 1),
    "2form": (1, 1),
    "beltrami": (-1, 1),
    "beltrami_conj": (1, -1),
    "K2": (2, 0),
    "K2_conj": (0, 2),
    "K2_01": (2, 1),
    "vector": (-1, 0),
}

BUNDLES = ("trivial", "fundamental", "EndE", "AdE")


@dataclass(frozen=True)
class FormKind:
    degree: str
    bundle: str = "trivial"

    def __post_init__(self):
        if self.degree not in DEGREES:
            raise KindMismatch(f"unknown degree {self.degree!r}")
        if self.bundle not in BUNDLES:
            raise KindMismatch(f"unknown bundle {self.bundle!r}")

    @property
    def weights(self):
        return DEGREES[self.degree]

    def with_degree(self, degree):
        return FormKind(degree, self.bundle)

    def __str__(self):
        return f"{self.degree}/{self.bundle}"


@dataclass
class Field:
    """A kind-tagged discrete field; values are (n_dofs, fiber_dim) complex."""

    kind: FormKind
    values: np.ndarray
    home: str  # "vertex" (full polygon vertices) or "cell"
    disc: "Discretization"

    def copy(self):
        return Field(self.kind, self.values.copy(), self.home, self.disc)

    def __add__(self, other):
        self._compat(other)
        return Field(self.kind, self.values + other.values, self.home, self.disc)

    def __sub__(self, other):
        self._compat(other)
        return Field(self.kind, self.values - other.values, self.home, self.disc)

    def __mul__(self, scalar):
        return Field(self.kind, self.values * scalar, self.home, self.disc)

    __rmul__ = __mul__

    def _compat(self, other):
        if self.kind != other.kind or self.home != other.home:
            raise KindMismatch(f"{self.kind}@{self.home} vs {other.kind}@{other.home}")

    def norm(self):
        return float(np.sqrt(abs(self.disc.ip(self, self))))

    def equivariance_residual(self):
        return self.disc.equivariance_residual(self)


@dataclass
class DiscreteOperator:
    """Sparse operator between reduced vertex spaces and/or cell spaces."""

    mat: sp.spmatrix
    dom: tuple  # (FormKind, home)
    cod: tuple
    disc: "Discretization"
    label: str = ""
    _adjoint: "DiscreteOperator | None" = dc_field(default=None, repr=False)

    def apply(self, f):
        kind, home = self.dom
        if f.kind != kind or f.home != home:
            raise KindMismatch(f"operator {self.label} expects {kind}@{home}, got {f.kind}@{f.home}")
        vec = self.disc.to_vec(f)
        out = self.mat @ vec
        return self.disc.from_vec(out, *self.cod)

    def __call__(self, f):
        return self.apply(f)

    def adjoint(self):
        """Mass-weighted conjugate transpose; adjoint(adjoint(op)) is op itself."""
        if self._adjoint is None:
            md = self.disc.mass_vec(*self.dom)
            mc = self.disc.mass_vec(*self.cod)
            mat = sp.diags(1.0 / md) @ self.mat.conj().T.tocsr() @ sp.diags(mc)
            self._adjoint = DiscreteOperator(
                mat=mat.tocsr(),
                dom=self.cod,
                cod=self.dom,
                disc=self.disc,
                label=f"adjoint({self.label})",
                _adjoint=self,
            )
        return self._adjoint

    def compose(self, other):
        """self after other."""
        if other.cod != self.dom:
            raise KindMismatch(f"cannot compose {self.label} o {other.label}")
        return DiscreteOperator(
            mat=(self.mat @ other.mat).tocsr(),
            dom=other.dom,
            cod=self.cod,
            disc=self.disc,
            label=f"{self.label}o{other.label}",
        )

    def __add__(self, other):
        if other.dom != self.dom or other.cod != self.cod:
            raise KindMismatch("operator shapes differ")
        return DiscreteOperator(self.mat + other.mat, self.dom, self.cod, self.disc,
                                label=f"{self.label}+{other.label}")

    def scaled(self, c):
        return DiscreteOperator(self.mat * c, self.dom, self.cod, self.disc, label=self.label)


class Discretization:
    """All assembled data for one (mesh, rep) pair."""

    def __init__(self, mesh, rep):
        self.mesh = mesh
        self.rep = rep
        self.n = rep.n
        self.algebra = bundle_mod.matrix_algebra(rep.n)
        self._holonomy = {}
        self._prolong = {}
        self._mass = {}
        self._ops = {}
        self._lap = {}
        self._factor = {}
        self._kernel = {}

        v = mesh.vertices
        t = mesh.triangles
        p, q, r = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        self.tri_area = 0.5 * np.imag(np.conj(q - p) * (r - p))
        if np.any(self.tri_area <= 0):
            raise SingularAssembly("non-positive triangle area")
        self.centroid = (p + q + r) / 3.0
        self.cell_density = np.asarray(density_fn(self.centroid), dtype=float)
        self.cell_dlog = np.asarray(dlog_density(self.centroid), dtype=complex)
        # P1 gradients: d/dzbar phi_i = i (z_k - z_j) / (4 A) for (i,j,k) cyclic
        self.gzbar = np.empty((len(t), 3), dtype=complex)
        for loc in range(3):
            e = v[t[:, (loc + 2) % 3]] - v[t[:, (loc + 1) % 3]]
            self.gzbar[:, loc] = 1j * e / (4.0 * self.tri_area)
        self.gz = np.conj(self.gzbar)

        # lumped Euclidean vertex areas
        lump = np.zeros(len(v))
        for loc in range(3):
            np.add.at(lump, t[:, loc], self.tri_area / 3.0)
        self.vertex_lump = lump
        self.vertex_density = np.asarray(mesh.density, dtype=float)

        # reduced vertex numbering: orbit members collapse onto their representative
        n_v = len(v)
        orbit_of = {}
        for orb in mesh.orbits:
            for m in orb.members:
                orbit_of[m] = orb
        reduced = []
        red_index = np.full(n_v, -1, dtype=int)
        for i in range(n_v):
            orb = orbit_of.get(i)
            if orb is None or orb.rep == i:
                red_index[i] = len(reduced)
                reduced.append(i)
        for i in range(n_v):
            if red_index[i] < 0:
                red_index[i] = red_index[orbit_of[i].rep]
        self.reduced_vertices = np.array(reduced, dtype=int)
        self.red_index = red_index
        self.n_reduced = len(reduced)
        self._transport_cache = {}

    # -- bundles ------------------------------------------------------------

    def holonomy(self, bundle):
        if bundle not in self._holonomy:
            self._holonomy[bundle] = bundle_mod.holonomy_action(self.rep, bundle)
        return self._holonomy[bundle]

    def fiber_dim(self, bundle):
        return self.holonomy(bundle).dim

    # -- transports and reduction -------------------------------------------

    def _orbit_transports(self, kind):
        """Per boundary-orbit member: scalar weight factor and bundle matrix."""
        key = kind
        if key in self._transport_cache:
            return self._transport_cache[key]
        p, q = kind.weights
        hol = self.holonomy(kind.bundle)
        group = self.mesh.group
        verts = self.mesh.vertices
        out = {}
        for orb in self.mesh.orbits:
            zr = verts[orb.rep]
            for m in orb.members:
                word = orb.words[m]
                if not word:
                    out[m] = (1.0 + 0.0j, np.eye(hol.dim, dtype=complex))
                    continue
                g = group.element(word)
                gp = g.deriv(zr)
                scalar = gp ** (-p) * np.conj(gp) ** (-q)
                out[m] = (scalar, hol.word_matrix(word))
        self._transport_cache[key] = out
        return out

    def prolongation(self, kind):
        """Sparse map reduced vertex dofs -> full polygon vertex dofs."""
        if kind in self._prolong:
            return self._prolong[kind]
        d = self.fiber_dim(kind.bundle)
        transports = self._orbit_transports(kind)
        rows, cols, vals = [], [], []
        for v in range(len(self.mesh.vertices)):
            ri = self.red_index[v]
            if v in transports:
                scalar, bmat = transports[v]
                blk = scalar * bmat
                for a in range(d):
                    for b in range(d):
                        if blk[a, b] != 0:
                            rows.append(v * d + a)
                            cols.append(ri * d + b)
                            vals.append(blk[a, b])
            else:
                for a in range(d):
                    rows.append(v * d + a)
                    cols.append(ri * d + a)
                    vals.append(1.0)
        P = sp.csr_matrix(
            (vals, (rows, cols)),
            shape=(len(self.mesh.vertices) * d, self.n_reduced * d),
            dtype=complex,
        )
        self._prolong[kind] = P
        return P

    def mass_vec(self, kind, home):
        """Diagonal of the (reduced) mass matrix as a real vector."""
        key = (kind, home)
        if key in self._mass:
            return self._mass[key]
        p, q = kind.weights
        d = self.fiber_dim(kind.bundle)
        if home == "cell":
            w = self.tri_area * self.cell_density ** (1 - p - q)
            out = np.repeat(w, d)
        else:
            w_full = self.vertex_lump * self.vertex_density ** (1 - p - q)
            transports = self._orbit_transports(kind)
            w_red = np.zeros(self.n_reduced)
            for v in range(len(self.mesh.vertices)):
                scale = 1.0
                if v in transports:
                    scale = abs(transports[v][0]) ** 2
                w_red[self.red_index[v]] += w_full[v] * scale
            out = np.repeat(w_red, d)
        self._mass[key] = out
        return out

    # -- field plumbing -------------------------------------------------------

    def field(self, kind, values=None, home="vertex"):
        d = self.fiber_dim(kind.bundle)
        n = self.mesh.n_triangles if home == "cell" else self.mesh.n_vertices
        if values is None:
            values = np.zeros((n, d), dtype=complex)
        else:
            values = np.asarray(values, dtype=complex).reshape(n, d)
        return Field(kind, values, home, self)

    def to_vec(self, f):
        """Flatten a field to the dof vector its operators act on."""
        if f.home == "cell":
            return f.values.ravel()
        return f.values[self.reduced_vertices].ravel()

    def from_vec(self, vec, kind, home):
        d = self.fiber_dim(kind.bundle)
        if home == "cell":
            return Field(kind, vec.reshape(self.mesh.n_triangles, d), home, self)
        full = self.prolongation(kind) @ vec
        return Field(kind, full.reshape(self.mesh.n_vertices, d), "vertex", self)

    def ip(self, f, g):
        """Mass inner product, linear in the first slot."""
        f._compat(g)
        if f.home == "cell":
            m = self.mass_vec(f.kind, "cell")
            return complex(np.sum(m * (f.values.ravel() * np.conj(g.values.ravel()))))
        m = self.mass_vec(f.kind, "vertex")
        return complex(np.sum(m * (self.to_vec(f) * np.conj(self.to_vec(g)))))

    def equivariance_residual(self, f):
        if f.home == "cell":
            return 0.0
        transports = self._orbit_transports(f.kind)
        res = 0.0
        for orb in self.mesh.orbits:
            ref = f.values[orb.rep]
            for m in orb.members:
                scalar, bmat = transports[m]
                pred = scalar * (bmat @ ref)
                res = max(res, float(np.abs(f.values[m] - pred).max()))
        return res

    def project_equivariant(self, f):
        """Overwrite orbit members from their representative (exact equivariance)."""
        transports = self._orbit_transports(f.kind)
        out = f.values.copy()
        for orb in self.mesh.orbits:
            ref = out[orb.rep]
            for m in orb.members:
                if m == orb.rep:
                    continue
                scalar, bmat = transports[m]
                out[m] = scalar * (bmat @ ref)
        return Field(f.kind, out, f.home, self)

    # -- first-order operators -------------------------------------------------

    def _stencil(self, grads, kind_in, degree_out, label, extra_vertex_term=None):
        """Cell-valued first-order operator from per-triangle P1 gradients."""
        d = self.fiber_dim(kind_in.bundle)
        t = self.mesh.triangles
        nt = len(t)
        nv = len(self.mesh.vertices)
        rows, cols, vals = [], [], []
        for loc in range(3):
            coe = grads[:, loc]
            if extra_vertex_term is not None:
                coe = coe + extra_vertex_term / 3.0
            for a in range(d):
                rows.extend((np.arange(nt) * d + a).tolist())
                cols.extend((t[:, loc] * d + a).tolist())
                vals.extend(coe.tolist())
        full = sp.csr_matrix((vals, (rows, cols)), shape=(nt * d, nv * d), dtype=complex)
        mat = full @ self.prolongation(kind_in)
        cod = FormKind(degree_out, kind_in.bundle)
        return DiscreteOperator(mat.tocsr(), (kind_in, "vertex"), (cod, "cell"), self, label)

    def dbar(self, kind):
        """d/dzbar on weight-(p,0) vertex fields; cell-valued output."""
        p, q = kind.weights
        key = ("dbar", kind)
        if key not in self._ops:
            if q != 0:
                raise KindMismatch(f"dbar needs a (p,0)-kind domain, got {kind}")
            out_degree = {"function": "(0,1)", "K2": "K2_01", "vector": "beltrami", "(1,0)": "2form"}[
                kind.degree
            ]
            grads = self.gzbar
            if kind.degree == "(1,0)":
                # dbar(a dz) = dzbar(a) dzbar ^ dz = 2i dzbar(a) dA
                grads = 2j * self.gzbar
            self._ops[key] = self._stencil(grads, kind, out_degree, f"dbar[{kind}]")
        return self._ops[key]

    def partial(self, kind):
        """d/dz; on (0,1)-forms the output is the 2-form coefficient."""
        key = ("partial", kind)
        if key not in self._ops:
            if kind.degree == "function":
                self._ops[key] = self._stencil(self.gz, kind, "(1,0)", f"partial[{kind}]")
            elif kind.degree == "(0,1)":
                # partial(w dzbar) = dz(w) dz ^ dzbar = -2i dz(w) dA
                self._ops[key] = self._stencil(-2j * self.gz, kind, "2form", f"partial[{kind}]")
            else:
                raise KindMismatch(f"partial not assembled for {kind}")
        return self._ops[key]

    def nabla(self, kind):
        """Metric (1,0)-connection on vector fields, cell-valued scalars out."""
        key = ("nabla", kind)
        if key not in self._ops:
            if kind.degree != "vector":
                raise KindMismatch(f"nabla acts on vector fields, got {kind}")
            self._ops[key] = self._stencil(
                self.gz, kind, "function", f"nabla[{kind}]", extra_vertex_term=self.cell_dlog
            )
        return self._ops[key]

    def interp(self, kind):
        """Vertex -> cell average (kind preserved)."""
        key = ("interp", kind)
        if key not in self._ops:
            d = self.fiber_dim(kind.bundle)
            t = self.mesh.triangles
            nt, nv = len(t), len(self.mesh.vertices)
            rows, cols, vals = [], [], []
            for loc in range(3):
                for a in range(d):
                    rows.extend((np.arange(nt) * d + a).tolist())
                    cols.extend((t[:, loc] * d + a).tolist())
                    vals.extend([1.0 / 3.0] * nt)
            full = sp.csr_matrix((vals, (rows, cols)), shape=(nt * d, nv * d), dtype=complex)
            mat = full @ self.prolongation(kind)
            self._ops[key] = DiscreteOperator(
                mat.tocsr(), (kind, "vertex"), (kind, "cell"), self, f"interp[{kind}]"
            )
        return self._ops[key]

    def to_vertex(self, kind):
        """Cell -> vertex, the mass adjoint of interp (L2 projection)."""
        return self.interp(kind).adjoint()

    def star(self, kind, home="vertex"):
        """Hodge star as a pointwise operator field transformation."""

        def act(f):
            if f.kind != kind or f.home != home:
                raise KindMismatch(f"star expects {kind}@{home}")
            if kind.degree == "(0,1)":
                return Field(f.kind, 1j * f.values, f.home, self)
            if kind.degree == "(1,0)":
                return Field(f.kind, -1j * f.values, f.home, self)
            if kind.degree == "2form":
                lam = self.cell_density if f.home == "cell" else self.vertex_density
                return Field(
                    FormKind("function", kind.bundle), f.values / lam[:, None], f.home, self
                )
            if kind.degree == "function":
                lam = self.cell_density if f.home == "cell" else self.vertex_density
                return Field(
                    FormKind("2form", kind.bundle), f.values * lam[:, None], f.home, self
                )
            raise KindMismatch(f"no star on {kind}")

        return act

    # -- Laplacians and Green operators -----------------------------------------

    def _first_order(self, kind, flavor):
        if flavor == "nabla":
            return self.nabla(kind)
        return self.dbar(kind)

    def laplacian(self, kind, flavor="dbar"):
        """dbar* dbar on weight-(p,0) vertex fields; flavor 'nabla' uses the
        metric (1,0)-connection instead (vector fields only)."""
        key = (kind, flavor)
        if key in self._lap:
            return self._lap[key]
        dop = self._first_order(kind, flavor)
        mat = dop.adjoint().mat @ dop.mat
        lap = DiscreteOperator(mat.tocsr(), dop.dom, dop.dom, self, f"lap[{kind},{flavor}]")
        lap.green_key = key
        self._lap[key] = lap
        return lap

    def kernel_vectors(self, kind, flavor="dbar"):
        """M-orthonormal analytic kernel of laplacian(kind), possibly empty."""
        key = (kind, flavor)
        if key in self._kernel:
            return self._kernel[key]
        vecs = []
        d = self.fiber_dim(kind.bundle)
        if kind.degree == "function" and kind.bundle == "trivial":
            vecs.append(np.ones(self.n_reduced * d, dtype=complex))
        elif kind.degree == "function" and kind.bundle == "EndE":
            v = np.zeros((self.n_reduced, d), dtype=complex)
            v[:, 0] = 1.0
            vecs.append(v.ravel())
        out = []
        m = self.mass_vec(kind, "vertex")
        lap = self.laplacian(kind, flavor)
        for v in vecs:
            v = v / np.sqrt(np.sum(m * np.abs(v) ** 2))
            res = np.abs(lap.mat @ v).max()
            if res > 1e-7:
                raise SingularAssembly(f"analytic kernel of lap[{kind}] fails, residual {res:.2e}")
            out.append(v)
        self._kernel[key] = out
        return out

    def stiffness(self, kind, flavor="dbar"):
        """Hermitian PSD quadratic form K = M lap (equals dbar^H M_cod dbar)."""
        lap = self.laplacian(kind, flavor)
        m = self.mass_vec(kind, "vertex")
        k = sp.diags(m) @ lap.mat
        return 0.5 * (k + k.conj().T)

    def green_factor(self, kind, shift, flavor="dbar"):
        key = (kind, float(shift), flavor)
        if key not in self._factor:
            m = self.mass_vec(kind, "vertex")
            a = self.stiffness(kind, flavor) + sp.diags(shift * m)
            if shift == 0.0:
                for v in self.kernel_vectors(kind, flavor):
                    mv = (m * v)[:, None]
                    a = a + sp.csr_matrix(mv @ mv.conj().T)
            self._factor[key] = spla.splu(a.tocsc())
        return self._factor[key]

    def green_apply(self, kind, f, shift=0.0, flavor="dbar"):
        """Solve (lap + shift m) u = m f, orthogonal to the kernel when shift = 0."""
        if f.kind != kind or f.home != "vertex":
            raise KindMismatch(f"green expects {kind}@vertex")
        m = self.mass_vec(kind, "vertex")
        rhs = self.to_vec(f)
        scale0 = np.linalg.norm(m * rhs)
        kern = self.kernel_vectors(kind, flavor) if shift == 0.0 else []
        for v in kern:
            rhs = rhs - np.sum(m * rhs * np.conj(v)) * v
        b = m * rhs
        if np.linalg.norm(b) <= 1e-13 * max(scale0, 1e-300):
            return self.from_vec(np.zeros_like(b), kind, "vertex")
        lu = self.green_factor(kind, shift, flavor)
        x = lu.solve(b)
        for v in kern:
            x = x - np.sum(m * x * np.conj(v)) * v
        res = np.linalg.norm(self.stiffness(kind, flavor) @ x + shift * m * x - b)
        scale = np.linalg.norm(b)
        if scale > 0 and res > 1e-9 * max(scale, 1e-30):
            raise SolverBreakdown("green solve did not converge", residual=res / scale)
        return self.from_vec(x, kind, "vertex")

    def exact_projector_apply(self, f):
        """Project a cell 1-form field onto the image of dbar (exact forms).

        For (0,1) bundle fields the potential space is sections; for Beltrami
        fields it is vector fields.  Idempotent and self-adjoint in the cell
        mass to solver precision.
        """
        if f.home != "cell":
            raise KindMismatch("exact projector works on cell fields")
        if f.kind.degree == "(0,1)":
            dom = FormKind("function", f.kind.bundle)
        elif f.kind.degree == "beltrami":
            dom = FormKind("vector", f.kind.bundle)
        else:
            raise KindMismatch(f"no exact projector for {f.kind}")
        dop = self.dbar(dom)
        pot = dop.adjoint().apply(f)
        pot = self.green_apply(dom, pot, 0.0)
        return dop.apply(pot)

    # -- eigen ------------------------------------------------------------------

    def eigen_smallest(self, kind, k, dense_limit=2200, flavor="dbar"):
        """Smallest k eigenpairs of laplacian(kind) in the mass inner product."""
        m = self.mass_vec(kind, "vertex")
        d = 1.0 / np.sqrt(m)
        a = sp.diags(d) @ self.stiffness(kind, flavor) @ sp.diags(d)
        a = 0.5 * (a + a.conj().T)
        n = a.shape[0]
        k = min(k, n - 2)
        if n <= dense_limit:
            w, u = np.linalg.eigh(a.toarray())
            w, u = w[:k], u[:, :k]
        else:
            v0 = np.full(n, 1.0) + 1e-3 * np.sin(np.arange(n))
            w, u = spla.eigsh(a.tocsc(), k=k, sigma=-1e-3, which="LM", v0=v0)
            order = np.argsort(w)
            w, u = w[order], u[:, order]
        vecs = d[:, None] * u
        return np.real(w), vecs

    # -- point evaluation --------------------------------------------------------

    def locate(self, points, tol=1e-9):
        """Triangle index and barycentric coordinates for points in the polygon."""
        pts = np.asarray(points, dtype=complex).ravel()
        if not hasattr(self, "_tri_kd"):
            from scipy.spatial import cKDTree

            self._tri_kd = cKDTree(np.column_stack([self.centroid.real, self.centroid.imag]))
        v = self.mesh.vertices
        t = self.mesh.triangles
        k_near = min(40, len(t))
        _, near = self._tri_kd.query(np.column_stack([pts.real, pts.imag]), k=k_near)
        near = np.atleast_2d(near)
        tri_idx = np.full(len(pts), -1, dtype=int)
        bary = np.zeros((len(pts), 3))
        for i, z in enumerate(pts):
            for cand in near[i]:
                p, q, r = v[t[cand]]
                det = np.imag(np.conj(q - p) * (r - p))
                l1 = np.imag(np.conj(q - z) * (r - z)) / det
                l2 = np.imag(np.conj(r - z) * (p - z)) / det
                l3 = 1.0 - l1 - l2
                if l1 >= -tol and l2 >= -tol and l3 >= -tol:
                    tri_idx[i] = cand
                    bary[i] = (l1, l2, l3)
                    break
        return tri_idx, bary

    def evaluate_field(self, f, points):
        """P1-interpolate a vertex field at points inside the polygon."""
        if f.home != "vertex":
            raise KindMismatch("evaluate_field interpolates vertex fields")
        tri_idx, bary = self.locate(points)
        if np.any(tri_idx < 0):
            raise SolverBreakdown("point outside the meshed domain")
        t = self.mesh.triangles
        vals = (
            bary[:, 0, None] * f.values[t[tri_idx, 0]]
            + bary[:, 1, None] * f.values[t[tri_idx, 1]]
            + bary[:, 2, None] * f.values[t[tri_idx, 2]]
        )
        return vals

    def evaluate_field_with_walk(self, f, points):
        """Evaluate an equivariant vertex field anywhere in the disk.

        Points outside the fundamental octagon are walked back by the deck
        group and the value is transported forward with the field's
        automorphy factors and bundle holonomy.
        """
        from .surface import walk_to_fundamental_domain

        pts = np.asarray(points, dtype=complex).ravel()
        group = self.mesh.group
        p, q = f.kind.weights
        hol = self.holonomy(f.kind.bundle)
        base = np.empty(len(pts), dtype=complex)
        words = []
        for i, z in enumerate(pts):
            z0, word = walk_to_fundamental_domain(group, z)
            base[i] = z0
            words.append(tuple(word))
        vals = self.evaluate_field(f, base)
        cache = {}
        for i, word in enumerate(words):
            if not word:
                continue
            if word not in cache:
                g = group.element(list(word))
                cache[word] = (g, hol.word_matrix(list(word)))
            g, bmat = cache[word]
            gp = g.deriv(base[i])
            vals[i] = (gp ** (-p) * np.conj(gp) ** (-q)) * (bmat @ vals[i])
        return vals


# ---------------------------------------------------------------------------
# Pointwise primitives
# ---------------------------------------------------------------------------


def _embed_ende(disc, f):
    """View an AdE-valued field inside the full EndE component space."""
    if f.kind.bundle == "EndE":
        return f
    if f.kind.bundle != "AdE":
        raise KindMismatch(f"cannot embed bundle {f.kind.bundle}")
    vals = np.zeros((f.values.shape[0], disc.fiber_dim("EndE")), dtype=complex)
    vals[:, 1:] = f.values
    return Field(FormKind(f.kind.degree, "EndE"), vals, f.home, disc)


def _scalar(f):
    if f.values.shape[1] != 1:
        raise KindMismatch(f"expected scalar fiber, got {f.kind}")
    return f.values[:, 0]


def mul_beltrami(mu, f):
    """Multiply by a Beltrami field: weight shift (p, q) -> (p - 1, q + 1)."""
    disc = mu.disc
    if mu.kind.degree != "beltrami":
        raise KindMismatch(f"first factor must be a Beltrami field, got {mu.kind}")
    if mu.home != f.home:
        raise KindMismatch("homes differ; interpolate first")
    p, q = f.kind.weights
    degree = _degree_for((p - 1, q + 1))
    vals = _scalar(mu)[:, None] * f.values
    return Field(FormKind(degree, f.kind.bundle), vals, f.home, disc)


def mul_beltrami_conj(mu, f):
    """Multiply by the conjugate of a Beltrami field: (p, q) -> (p + 1, q - 1)."""
    disc = mu.disc
    if mu.kind.degree != "beltrami":
        raise KindMismatch(f"first factor must be a Beltrami field, got {mu.kind}")
    if mu.home != f.home:
        raise KindMismatch("homes differ; interpolate first")
    p, q = f.kind.weights
    degree = _degree_for((p + 1, q - 1))
    vals = np.conj(_scalar(mu))[:, None] * f.values
    return Field(FormKind(degree, f.kind.bundle), vals, f.home, disc)


def _degree_for(pq):
    for name, w in DEGREES.items():
        if w == pq:
            return name
    raise KindMismatch(f"no named degree with weights {pq}")


def mul_scalar(s, f):
    """Multiply by a scalar function field (kind preserved)."""
    if s.kind.degree != "function" or s.kind.bundle != "trivial":
        raise KindMismatch(f"scalar factor must be a trivial function, got {s.kind}")
    if s.home != f.home:
        raise KindMismatch("homes differ")
    return Field(f.kind, _scalar(s)[:, None] * f.values, f.home, f.disc)


def mu_pair(mu_a, mu_b):
    """mu_a conj(mu_b): a plain function."""
    if mu_a.kind.degree != "beltrami" or mu_b.kind.degree != "beltrami":
        raise KindMismatch("mu_pair needs two Beltrami fields")
    vals = _scalar(mu_a) * np.conj(_scalar(mu_b))
    return Field(FormKind("function", "trivial"), vals[:, None], mu_a.home, mu_a.disc)


def ad_action(nu, f):
    """Pointwise bracket [nu, f]; degree adds, bundle stays End E."""
    disc = nu.disc
    if nu.home != f.home:
        raise KindMismatch("homes differ")
    nu_e = _embed_ende(disc, nu)
    f_e = _embed_ende(disc, f)
    pn, qn = nu_e.kind.weights
    pf, qf = f_e.kind.weights
    degree = _degree_for((pn + pf, qn + qf))
    vals = disc.algebra.ad(nu_e.values, f_e.values)
    return Field(FormKind(degree, "EndE"), vals, f.home, disc)


def star_ad_star(nu, omega):
    """The operator star ad(nu) star of the variation formulas.

    Acting on (0,1)-forms it equals minus the adjoint of ad(nu):
    star ad(nu) star (omega) = -density^-1 [nu*, omega], a section.
    """
    disc = nu.disc
    if omega.kind.degree != "(0,1)":
        raise KindMismatch(f"star_ad_star acts on (0,1)-forms, got {omega.kind}")
    if nu.home != omega.home:
        raise KindMismatch("homes differ")
    nu_e = _embed_ende(disc, nu)
    om_e = _embed_ende(disc, omega)
    lam = disc.cell_density if omega.home == "cell" else disc.vertex_density
    vals = -disc.algebra.ad(np.conj(nu_e.values), om_e.values) / lam[:, None]
    return Field(FormKind("function", "EndE"), vals, omega.home, disc)


def dagger(f):
    """Conjugate transpose: (p, q) -> (q, p), components conjugated."""
    p, q = f.kind.weights
    degree = _degree_for((q, p))
    return Field(FormKind(degree, f.kind.bundle), np.conj(f.values), f.home, f.disc)


def fiber_trace(f):
    """Matrix trace of an End E-valued field (AdE fields trace to zero)."""
    disc = f.disc
    if f.kind.bundle == "AdE":
        vals = np.zeros((f.values.shape[0], 1), dtype=complex)
    elif f.kind.bundle == "EndE":
        vals = (f.values[:, 0] * np.sqrt(disc.n))[:, None]
    else:
        raise KindMismatch(f"trace needs an End E field, got {f.kind}")
    return Field(FormKind(f.kind.degree, "trivial"), vals, f.home, disc)


def beltrami_from_nu_pair(nu_a, nu_b):
    """density^-1 tr(nu_a nu_b) as a Beltrami field (both factors (0,1))."""
    disc = nu_a.disc
    if nu_a.kind.degree != "(0,1)" or nu_b.kind.degree != "(0,1)":
        raise KindMismatch("need two (0,1)-forms")
    if nu_a.home != nu_b.home:
        raise KindMismatch("homes differ")
    a = _embed_ende(disc, nu_a)
    b = _embed_ende(disc, nu_b)
    tr = disc.algebra.pair_trace(a.values, b.values)
    lam = disc.cell_density if nu_a.home == "cell" else disc.vertex_density
    vals = (tr / lam)[:, None]
    return Field(FormKind("beltrami", "trivial"), vals, nu_a.home, disc)


def density_inverse_scale(f):
    """Multiply by density^-1, shifting the weight bookkeeping by (-1, -1)."""
    disc = f.disc
    p, q = f.kind.weights
    degree = _degree_for((p - 1, q - 1))
    lam = disc.cell_density if f.home == "cell" else disc.vertex_density
    return Field(FormKind(degree, f.kind.bundle), f.values / lam[:, None], f.home, disc)


def wedge_integrate(alpha, beta):
    """The pairing i int tr(alpha ^ beta-bar-transpose) of two (0,1)-forms.

    Evaluated by the density-free cell quadrature; for a mass-orthonormal
    harmonic field the diagonal value is 1.
    """
    disc = alpha.disc
    if alpha.kind.degree != "(0,1)" or beta.kind.degree != "(0,1)":
        raise KindMismatch("wedge_integrate pairs (0,1)-forms")
    a = alpha if alpha.home == "cell" else disc.interp(alpha.kind).apply(alpha)
    b = beta if beta.home == "cell" else disc.interp(beta.kind).apply(beta)
    av, bv = a.values, b.values
    if alpha.kind.bundle != beta.kind.bundle:
        av = _embed_ende(disc, a).values
        bv = _embed_ende(disc, b).values
    return complex(np.sum(disc.tri_area * np.sum(av * np.conj(bv), axis=1)))


def star_conj(f):
    """Conjugate-linear Hodge star on 1-forms: dagger after star."""
    if f.kind.degree == "(0,1)":
        return dagger(Field(f.kind, 1j * f.values, f.home, f.disc))
    if f.kind.degree == "(1,0)":
        return dagger(Field(f.kind, -1j * f.values, f.home, f.disc))
    raise KindMismatch(f"star_conj acts on 1-forms, got {f.kind}")


_PRIMITIVES = {
    "mul_beltrami": mul_beltrami,
    "mul_beltrami_conj": mul_beltrami_conj,
    "ad": ad_action,
    "star_ad_star": star_ad_star,
    "star_conj": star_conj,
    "trace": fiber_trace,
    "wedge_integrate": wedge_integrate,
    "density_inverse_scale": density_inverse_scale,
    "conj_transpose": dagger,
    "mu_pair": mu_pair,
    "beltrami_nu_pair": beltrami_from_nu_pair,
    "mul_scalar": mul_scalar,
}


def apply_primitive(token, *fields):
    """Dispatch a named pointwise primitive; raises KindMismatch on bad kinds."""
    if token not in _PRIMITIVES:
        raise KindMismatch(f"unknown primitive {token!r}")
    return _PRIMITIVES[token](*fields)


# ---------------------------------------------------------------------------
# Module-level assemble / green wrappers
# ---------------------------------------------------------------------------

_DISC_CACHE = {}


def discretization(mesh, rep):
    key = (id(mesh), id(rep))
    if key not in _DISC_CACHE:
        _DISC_CACHE[key] = Discretization(mesh, rep)
    return _DISC_CACHE[key]


def assemble(which, mesh, rep, kind, shift=0.5):
    """Assemble a named operator on the quotient mesh.

    which: dbar | partial | star | mass | laplacian | shifted_laplacian | nabla
    """
    disc = discretization(mesh, rep)
    if which == "dbar":
        return disc.dbar(kind)
    if which == "partial":
        return disc.partial(kind)
    if which == "nabla":
        return disc.nabla(kind)
    if which == "laplacian":
        return disc.laplacian(kind)
    if which == "shifted_laplacian":
        lap = disc.laplacian(kind)
        m = disc.mass_vec(kind, "vertex")
        mat = lap.mat + sp.diags(shift * m)
        return DiscreteOperator(mat.tocsr(), lap.dom, lap.cod, disc, f"lap+{shift}[{kind}]")
    if which == "mass":
        m = disc.mass_vec(kind, "vertex")
        return DiscreteOperator(
            sp.diags(m).tocsr(), (kind, "vertex"), (kind, "vertex"), disc, f"mass[{kind}]"
        )
    if which == "star":
        return disc.star(kind)
    raise KindMismatch(f"unknown operator {which!r}")


def green_apply(lap, f, shift=0.0):
    """Green solve against an assembled Laplacian (spec-level wrapper)."""
    kind, _ = lap.dom
    flavor = getattr(lap, "green_key", (kind, "dbar"))[1]
    return lap.disc.green_apply(kind, f, shift, flavor)
