"""Twisted simplicial cohomology on the quotient mesh.

Cochains with coefficients in a flat system have d o d = 0 exactly, so kernel
dimensions of the cochain Hodge Laplacians are exact cohomology dimensions:
the zero modes sit at round-off while the rest of the spectrum is O(1).  This
is what makes harmonic ranks decidable at coarse levels, where interpolation
error would otherwise blur the gap.

Systems used here: the bundle holonomies (trivial, End E, Ad E) for the
bundle-valued ranks, and the adjoint sl(2, C) system of the surface group
itself, whose first cohomology is twice the space of holomorphic quadratic
differentials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GapUndecidable


def sl2_adjoint_mats(group):
    """Generator matrices of X -> g X g^-1 on sl(2, C), in a fixed basis."""
    basis = [
        np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
        np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex),
        np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex),
    ]
    # dual basis under the trace pairing tr(X Y): H<->H/2, E<->F
    def expand(x):
        return np.array([0.5 * np.trace(basis[0] @ x), np.trace(basis[2] @ x), np.trace(basis[1] @ x)])

    out = {}
    for name, g in group.generators.items():
        m = g.mat
        minv = np.linalg.inv(m)
        cols = [expand(m @ e @ minv) for e in basis]
        out[name] = np.column_stack(cols)
    return out


def _word_matrix(mats, word, d):
    m = np.eye(d, dtype=complex)
    for name in word:
        base = mats[name.lower()]
        m = m @ (np.linalg.inv(base) if name[0].isupper() else base)
    return m


@dataclass
class CochainComplex:
    """Twisted quotient cochain complex with Whitney-form inner products."""

    mesh: object
    dim: int
    d0: sp.spmatrix  # reduced vertices -> reduced edges
    d1: sp.spmatrix  # reduced edges -> triangles
    m0: np.ndarray  # diagonal vertex mass
    m1: sp.spmatrix  # Whitney edge mass (SPD, sparse)
    m2: np.ndarray  # diagonal triangle mass
    edge_reps: list  # representative (u, v) polygon edge per reduced edge
    edge_index: dict  # canonical polygon edge -> reduced index (interior + reps)
    poly_edge_index: dict  # canonical polygon edge -> polygon edge index
    prolong_edges: sp.spmatrix  # reduced edges -> polygon edges
    tri_area: np.ndarray

    def laplacian1_form(self):
        """Quadratic form of the 1-cochain Hodge Laplacian (pencil with m1)."""
        k_exact = self.m1 @ self.d0 @ sp.diags(1.0 / self.m0) @ self.d0.conj().T @ self.m1
        k_coexact = self.d1.conj().T @ sp.diags(self.m2) @ self.d1
        k = (k_exact + k_coexact).tocsr()
        return 0.5 * (k + k.conj().T)

    def h0_dimension(self, tol=1e-8):
        """dim ker d0 (flat sections), exact for flat systems."""
        k = (self.d0.conj().T @ self.m1 @ self.d0).tocsr()
        k = 0.5 * (k + k.conj().T)
        w = _smallest_eigs(k, sp.diags(self.m0), min(8, k.shape[0] - 2))
        return int(np.sum(w < tol * max(w[-1], 1.0)))

    def harmonic1(self, k_guess=14, gap_min=100.0):
        """Harmonic 1-cochains: (eigenvalues, vectors, rank).

        The rank is the count of numerically-zero modes; raises GapUndecidable
        when the relative gap between the zero block and the rest is < gap_min.
        """
        k1 = self.laplacian1_form()
        want = min(k_guess, k1.shape[0] - 2)
        w, v = _smallest_eigs(k1, self.m1, want, vectors=True)
        scale = max(w[-1], 1e-30)
        rank = int(np.sum(w < 1e-8 * scale))
        if rank == 0 or rank >= len(w):
            raise GapUndecidable(
                f"no zero block among smallest {len(w)} eigenvalues of the 1-form Laplacian",
                ratio=0.0,
            )
        ratio = w[rank] / max(w[rank - 1], 1e-300)
        if ratio < gap_min:
            raise GapUndecidable(
                f"1-form Laplacian gap ratio {ratio:.1f} below {gap_min}", ratio=ratio
            )
        return w[:rank], v[:, :rank], rank


def _smallest_eigs(k, m, count, vectors=False, dense_limit=900):
    n = k.shape[0]
    if n <= dense_limit:
        kd = k.toarray()
        md = m.toarray() if sp.issparse(m) else np.asarray(m)
        import scipy.linalg as sla

        w, v = sla.eigh(kd, md)
        w, v = w[:count], v[:, :count]
    else:
        v0 = np.full(n, 1.0) + 1e-3 * np.sin(np.arange(n))
        w, v = spla.eigsh(k.tocsc(), k=count, M=m.tocsc(), sigma=-1e-3, which="LM", v0=v0)
        order = np.argsort(w)
        w, v = w[order], v[:, order]
    if vectors:
        return np.real(w), v
    return np.real(w)


def build_complex(mesh, generator_mats, dim):
    """Assemble the twisted quotient cochain complex for one flat system."""
    tris = mesh.triangles
    nv = mesh.n_vertices
    verts = mesh.vertices

    # canonical polygon edges
    edge_set = {}
    for (p, q, r) in tris:
        for e in ((p, q), (q, r), (r, p)):
            key = (min(e), max(e))
            edge_set.setdefault(key, len(edge_set))
    n_pe = len(edge_set)

    # boundary identifications between canonical edges
    partner = {}
    for pr in mesh.pairings:
        i, j = pr.edge
        k, l = pr.partner
        e = (min(i, j), max(i, j))
        f = (min(k, l), max(k, l))
        sign = (1 if (i, j) == e else -1) * (1 if (k, l) == f else -1)
        partner[e] = (f, list(pr.word), sign)

    # representative choice: an identified pair keeps the lexicographically
    # smaller canonical edge
    edge_red = {}
    reps = []
    for e in sorted(edge_set):
        if e in edge_red:
            continue
        mate = partner.get(e)
        edge_red[e] = len(reps)
        info = None
        if mate is not None:
            f, word, sign = mate
            if f in edge_red:
                # e was reached as someone's partner already
                continue
            edge_red[f] = edge_red[e]
            info = (f, word, sign)
        reps.append((e, info))
    n_re = len(reps)

    # prolongation reduced edges -> polygon edges (d x d blocks)
    rows, cols, vals = [], [], []
    for e, idx in edge_set.items():
        ri = edge_red[e]
        rep_e, info = reps[ri]
        if e == rep_e:
            blk = np.eye(dim, dtype=complex)
        else:
            f, word, sign = info
            blk = sign * _word_matrix(generator_mats, word, dim)
        for a in range(dim):
            for b in range(dim):
                if blk[a, b] != 0:
                    rows.append(idx * dim + a)
                    cols.append(ri * dim + b)
                    vals.append(blk[a, b])
    prolong_e = sp.csr_matrix((vals, (rows, cols)), shape=(n_pe * dim, n_re * dim), dtype=complex)

    # vertex reduction: same orbit structure as the field calculus, but with
    # pure bundle transports (0-cochains carry no conformal weight)
    orbit_of = {}
    for orb in mesh.orbits:
        for m in orb.members:
            orbit_of[m] = orb
    red_index = np.full(nv, -1, dtype=int)
    reduced_vertices = []
    for i in range(nv):
        orb = orbit_of.get(i)
        if orb is None or orb.rep == i:
            red_index[i] = len(reduced_vertices)
            reduced_vertices.append(i)
    for i in range(nv):
        if red_index[i] < 0:
            red_index[i] = red_index[orbit_of[i].rep]
    rows, cols, vals = [], [], []
    for v in range(nv):
        orb = orbit_of.get(v)
        if orb is None or orb.rep == v:
            blk = np.eye(dim, dtype=complex)
        else:
            blk = _word_matrix(generator_mats, orb.words[v], dim)
        ri = red_index[v]
        for a in range(dim):
            for b in range(dim):
                if blk[a, b] != 0:
                    rows.append(v * dim + a)
                    cols.append(ri * dim + b)
                    vals.append(blk[a, b])
    n_rv = len(reduced_vertices)
    prolong_v = sp.csr_matrix((vals, (rows, cols)), shape=(nv * dim, n_rv * dim), dtype=complex)

    # polygon incidence d0
    rows, cols, vals = [], [], []
    for (u, v), idx in edge_set.items():
        for a in range(dim):
            rows.append(idx * dim + a)
            cols.append(v * dim + a)
            vals.append(1.0)
            rows.append(idx * dim + a)
            cols.append(u * dim + a)
            vals.append(-1.0)
    d0_poly = sp.csr_matrix((vals, (rows, cols)), shape=(n_pe * dim, nv * dim), dtype=complex)

    # selector polygon edges -> representative edges
    rows, cols, vals = [], [], []
    for ri, (rep_e, _) in enumerate(reps):
        idx = edge_set[rep_e]
        for a in range(dim):
            rows.append(ri * dim + a)
            cols.append(idx * dim + a)
            vals.append(1.0)
    sel_e = sp.csr_matrix((vals, (rows, cols)), shape=(n_re * dim, n_pe * dim), dtype=complex)

    d0 = (sel_e @ d0_poly @ prolong_v).tocsr()

    # d1: triangle boundary sums of polygon edge values
    rows, cols, vals = [], [], []
    for t, (p, q, r) in enumerate(tris):
        for (u, v) in ((p, q), (q, r), (r, p)):
            key = (min(u, v), max(u, v))
            idx = edge_set[key]
            sign = 1.0 if (u, v) == key else -1.0
            for a in range(dim):
                rows.append(t * dim + a)
                cols.append(idx * dim + a)
                vals.append(sign)
    d1_poly = sp.csr_matrix((vals, (rows, cols)), shape=(len(tris) * dim, n_pe * dim), dtype=complex)
    d1 = (d1_poly @ prolong_e).tocsr()

    # masses
    p, q, r = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    tri_area = 0.5 * np.imag(np.conj(q - p) * (r - p))
    from .surface import density as density_fn

    lam_t = np.asarray(density_fn((p + q + r) / 3.0), dtype=float)
    lam_v = np.asarray(mesh.density, dtype=float)
    lump = np.zeros(nv)
    for loc in range(3):
        np.add.at(lump, tris[:, loc], tri_area / 3.0)
    m0_poly = lump * lam_v
    m0 = np.zeros(n_rv)
    for v in range(nv):
        m0[red_index[v]] += m0_poly[v]
    m0 = np.repeat(m0, dim)

    m1_scalar = _whitney_edge_mass(verts, tris, edge_set, tri_area)
    m1_poly = sp.kron(m1_scalar, sp.eye(dim), format="csr")
    m1 = (prolong_e.conj().T @ m1_poly @ prolong_e).tocsr()
    m1 = 0.5 * (m1 + m1.conj().T)

    m2 = np.repeat(1.0 / (tri_area * lam_t), dim)

    return CochainComplex(
        mesh=mesh,
        dim=dim,
        d0=d0,
        d1=d1,
        m0=m0,
        m1=m1,
        m2=m2,
        edge_reps=reps,
        edge_index={e: edge_red[e] for e in edge_set},
        poly_edge_index=dict(edge_set),
        prolong_edges=prolong_e,
        tri_area=tri_area,
    )


def _whitney_edge_mass(verts, tris, edge_set, tri_area):
    """L2 mass of Whitney 1-forms; conformal invariance makes it density-free."""
    n_pe = len(edge_set)
    rows, cols, vals = [], [], []
    for t, tri in enumerate(tris):
        zs = verts[tri]
        area = tri_area[t]
        # P1 gradients as complex numbers (x + i y components)
        g = [1j * (zs[(loc + 2) % 3] - zs[(loc + 1) % 3]) / (2.0 * area) for loc in range(3)]

        def ip(u, v):
            return float(np.real(np.conj(u) * v))

        # int phi_a phi_b = area (1 + delta_ab) / 12
        def iphi(a, b):
            return area * (2.0 if a == b else 1.0) / 12.0

        local_edges = [(0, 1), (1, 2), (2, 0)]
        for (ai, aj) in local_edges:
            for (bi, bj) in local_edges:
                val = (
                    iphi(ai, bi) * ip(g[aj], g[bj])
                    - iphi(ai, bj) * ip(g[aj], g[bi])
                    - iphi(aj, bi) * ip(g[ai], g[bj])
                    + iphi(aj, bj) * ip(g[ai], g[bi])
                )
                ge = (tri[ai], tri[aj])
                gf = (tri[bi], tri[bj])
                se = 1.0 if ge == (min(ge), max(ge)) else -1.0
                sf = 1.0 if gf == (min(gf), max(gf)) else -1.0
                rows.append(edge_set[(min(ge), max(ge))])
                cols.append(edge_set[(min(gf), max(gf))])
                vals.append(se * sf * val)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n_pe, n_pe))
    return 0.5 * (m + m.T)


def whitney_components(cx, cochain):
    """Per-triangle (dz, dzbar) components of a Whitney-interpolated 1-cochain."""
    mesh = cx.mesh
    dim = cx.dim
    verts = mesh.vertices
    tris = mesh.triangles
    omega_poly = (cx.prolong_edges @ cochain).reshape(-1, dim)
    a_dz = np.zeros((len(tris), dim), dtype=complex)
    a_dzb = np.zeros((len(tris), dim), dtype=complex)
    for t, tri in enumerate(tris):
        zs = verts[tri]
        area = 0.5 * np.imag(np.conj(zs[1] - zs[0]) * (zs[2] - zs[0]))
        g = [1j * (zs[(loc + 2) % 3] - zs[(loc + 1) % 3]) / (2.0 * area) for loc in range(3)]
        gx = np.zeros(dim, dtype=complex)
        gy = np.zeros(dim, dtype=complex)
        for (ai, aj) in ((0, 1), (1, 2), (2, 0)):
            ge = (tri[ai], tri[aj])
            key = (min(ge), max(ge))
            sign = 1.0 if ge == key else -1.0
            val = sign * omega_poly[cx.poly_edge_index[key]]
            w = (g[aj] - g[ai]) / 3.0
            gx += val * np.real(w)
            gy += val * np.imag(w)
        a_dz[t] = 0.5 * (gx - 1j * gy)
        a_dzb[t] = 0.5 * (gx + 1j * gy)
    return a_dz, a_dzb


def star_split(cx, harmonics):
    """Split harmonic 1-cochains into the +-i eigenclusters of the Hodge star.

    Returns (plus_vectors, minus_vectors, separation), where separation is the
    distance between the eigenvalue clusters of the compressed star operator
    (2.0 for a perfect complex-structure split).
    """
    k = harmonics.shape[1]
    gram = np.zeros((k, k), dtype=complex)
    smat = np.zeros((k, k), dtype=complex)
    comps = [whitney_components(cx, harmonics[:, j]) for j in range(k)]
    w = cx.tri_area
    for i in range(k):
        ai, bi = comps[i]
        for j in range(k):
            aj, bj = comps[j]
            gram[i, j] = np.sum(w * np.sum(aj * np.conj(ai) + bj * np.conj(bi), axis=1))
            # star: dz-part x (-i), dzbar-part x (+i)
            smat[i, j] = np.sum(w * np.sum(-1j * aj * np.conj(ai) + 1j * bj * np.conj(bi), axis=1))
    sop = np.linalg.solve(gram, smat)
    evals, evecs = np.linalg.eig(sop)
    plus = evals.imag > 0
    sep = float(np.min(evals[plus].imag) - np.max(evals[~plus].imag)) if plus.any() and (~plus).any() else 0.0
    return harmonics @ evecs[:, plus], harmonics @ evecs[:, ~plus], sep
