"""Orthonormal harmonic bases and the Kodaira-Spencer evaluator.

Ranks are certified by the flat cochain complexes (exact cohomology
dimensions, zero modes at round-off), while the basis fields themselves come
from the smallest eigenvectors of the smooth P1 Dolbeault Laplacians:

  * deformation directions of the surface: Beltrami fields density^-1 qbar
    with q in the near-kernel of dbar on quadratic differentials; rank from
    H^1 of the adjoint sl(2) system of the surface group (dimension 2 x 3),
  * bundle directions: daggers of near-holomorphic (1,0)-sections of
    K (x) End E / Ad E; rank from H^1 of the unitary local system split into
    the +-i Hodge-star clusters.

Each basis field is then stripped of its discretely-exact component, so
exact forms pair to zero with the basis at solver precision, and the cell
representatives are Loewdin-orthonormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import calculus as calc
from . import cohomology as coh
from .calculus import Field, FormKind
from .errors import GapUndecidable, KindMismatch, MissingChiData


@dataclass
class HarmonicBasis:
    kind: str  # TX | EndE | AdE
    elements: list  # cell-home canonical fields, orthonormal in the cell mass
    vertex_elements: list  # smooth vertex representatives of the same classes
    gram: np.ndarray
    certificate: dict  # cohomology rank evidence
    disc: calc.Discretization
    _vgram_inv: np.ndarray | None = dc_field(default=None, repr=False)

    @property
    def dimension(self):
        return len(self.elements)

    def vertex_gram_inverse(self):
        if self._vgram_inv is None:
            k = self.dimension
            g = np.empty((k, k), dtype=complex)
            for i, vi in enumerate(self.vertex_elements):
                for j, vj in enumerate(self.vertex_elements):
                    g[i, j] = self.disc.ip(vj, vi)
            self._vgram_inv = np.linalg.inv(g)
        return self._vgram_inv


@dataclass
class TangentVector:
    """A deformation direction (mu, nu); either side may be zero."""

    mu: Field | None = None
    nu: Field | None = None

    def scaled(self, c):
        return TangentVector(
            mu=None if self.mu is None else self.mu * c,
            nu=None if self.nu is None else self.nu * c,
        )


_FIELD_KIND = {
    "TX": ("K2", "trivial", "beltrami"),
    "EndE": ("(1,0)", "EndE", "(0,1)"),
    "AdE": ("(1,0)", "AdE", "(0,1)"),
}


def _certify_rank(mesh, rep, kind, gap_min=100.0):
    """Exact cohomology rank for the requested harmonic space."""
    if kind == "TX":
        mats = coh.sl2_adjoint_mats(mesh.group)
        dim = 3
    else:
        from .bundle import holonomy_action

        mats = holonomy_action(rep, kind).generator_mats
        dim = mats["a1"].shape[0]
    cx = coh.build_complex(mesh, mats, dim)
    guess = {"TX": 10, "EndE": 14, "AdE": 10}[kind]
    w, v, h1 = cx.harmonic1(k_guess=guess, gap_min=gap_min)
    plus, minus, sep = coh.star_split(cx, v)
    if plus.shape[1] != minus.shape[1] or sep < 0.2:
        raise GapUndecidable(
            f"Hodge-star split of the harmonic 1-cochains is ambiguous (sep {sep:.2f})",
            ratio=sep,
        )
    return plus.shape[1], {
        "h1": h1,
        "h0": cx.h0_dimension(),
        "zero_mode_max": float(np.abs(w).max()),
        "star_separation": float(sep),
        "rank": plus.shape[1],
    }


def harmonic_basis(kind, mesh, rep, gap_min=100.0):
    """Orthonormal harmonic basis of the requested sector.

    kind: 'TX' (harmonic Beltrami differentials), 'EndE' or 'AdE'
    (bundle-valued harmonic (0,1)-forms).
    """
    if kind not in _FIELD_KIND:
        raise KindMismatch(f"unknown harmonic sector {kind!r}")
    disc = calc.discretization(mesh, rep)
    if not hasattr(disc, "_bases"):
        disc._bases = {}
    if kind in disc._bases:
        return disc._bases[kind]
    rank, certificate = _certify_rank(mesh, rep, kind)

    hol_degree, bund, out_degree = _FIELD_KIND[kind]
    hol_kind = FormKind(hol_degree, bund)
    evals, evecs = disc.eigen_smallest(hol_kind, rank + 3)
    certificate["p1_eigenvalues"] = [float(x) for x in evals]

    vertex_elems = []
    cell_elems = []
    for j in range(rank):
        q = disc.from_vec(evecs[:, j], hol_kind, "vertex")
        if kind == "TX":
            fld = calc.density_inverse_scale(calc.dagger(q))
        else:
            fld = calc.dagger(q)
        vertex_elems.append(fld)
        cell = disc.interp(fld.kind).apply(fld)
        cell_elems.append(cell - disc.exact_projector_apply(cell))

    cell_elems = _loewdin(disc, cell_elems)
    # vertex representatives: pull the deflated cell classes back to smooth
    # P1 fields and orthonormalize independently in the vertex mass, so both
    # representations carry exact Gram matrices
    vertex_elems = _loewdin(disc, [disc.to_vertex(c.kind).apply(c) for c in cell_elems])

    k = len(cell_elems)
    gram = np.empty((k, k), dtype=complex)
    for i, ei in enumerate(cell_elems):
        for j, ej in enumerate(cell_elems):
            gram[i, j] = disc.ip(ej, ei)

    basis = HarmonicBasis(
        kind=kind,
        elements=cell_elems,
        vertex_elements=vertex_elems,
        gram=gram,
        certificate=certificate,
        disc=disc,
    )
    disc._bases[kind] = basis
    return basis


def _loewdin(disc, fields):
    """Symmetric orthonormalization in the fields' mass inner product."""
    k = len(fields)
    g = np.empty((k, k), dtype=complex)
    for i, fi in enumerate(fields):
        for j, fj in enumerate(fields):
            g[i, j] = disc.ip(fj, fi)
    w, u = np.linalg.eigh(0.5 * (g + g.conj().T))
    ginv_half = u @ np.diag(1.0 / np.sqrt(np.maximum(w, 1e-300))) @ u.conj().T
    out = []
    for i in range(k):
        acc = fields[0] * ginv_half[0, i]
        for j in range(1, k):
            acc = acc + fields[j] * ginv_half[j, i]
        out.append(acc)
    return out


def project(f, basis):
    """Orthogonal projection onto the harmonic span; idempotent, self-adjoint."""
    if basis.dimension == 0:
        raise KindMismatch("empty basis")
    want = basis.elements[0].kind
    if f.kind != want:
        raise KindMismatch(f"projection expects {want}, got {f.kind}")
    disc = basis.disc
    if f.home == "cell":
        out = None
        for e in basis.elements:
            c = disc.ip(f, e)
            out = e * c if out is None else out + e * c
        return out
    ginv = basis.vertex_gram_inverse()
    coeffs = np.array([disc.ip(f, v) for v in basis.vertex_elements])
    coeffs = ginv @ coeffs
    out = None
    for c, v in zip(coeffs, basis.vertex_elements):
        out = v * c if out is None else out + v * c
    return out


def tangent_vector(basis_tx, basis_nu, mu_coeffs=None, nu_coeffs=None, home="vertex"):
    """Assemble a TangentVector from basis coefficients."""

    def comb(basis, coeffs):
        if coeffs is None:
            return None
        elems = basis.vertex_elements if home == "vertex" else basis.elements
        out = None
        for c, e in zip(coeffs, elems):
            if c == 0:
                continue
            out = e * c if out is None else out + e * c
        return out

    return TangentVector(mu=comb(basis_tx, mu_coeffs), nu=comb(basis_nu, nu_coeffs))


def kodaira_spencer(tv, chi1, chi2, at, basis_tx, basis_nu):
    """Derivative of the coordinate family in the direction tv at the point `at`.

    At the base point (at zero) this is the pair of harmonic projections.  At
    a nearby point the quotient map chi1 transports the modified direction
    back to the base surface; the bundle factor is carried to first order by
    its closed-form derivative (d/de of the gauge derivative is -nu-dagger),
    so no chi2 grid is required for the first-order evaluation.
    """
    disc = basis_tx.disc
    at_zero = at is None or (at.mu is None and at.nu is None)

    mu1 = tv.mu
    nu1 = tv.nu

    if at_zero:
        mu_out = project(mu1, basis_tx) if mu1 is not None else None
        nu_out = project(nu1, basis_nu) if nu1 is not None else None
        return TangentVector(mu=mu_out, nu=nu_out)

    if chi1 is None:
        raise MissingChiData("evaluation away from the base point needs the chi1 grid")

    # numerator mu_1 - density^-1 tr(nu_1 nu); correction vanishes when either
    # nu is absent
    num = mu1
    if nu1 is not None and at.nu is not None:
        corr = calc.beltrami_from_nu_pair(_vertex(disc, nu1), _vertex(disc, at.nu))
        num = corr * (-1.0) if num is None else _vertex(disc, num) - corr
    if num is not None:
        num = _vertex(disc, num)
        denom = np.ones(len(disc.mesh.vertices))
        if at.mu is not None:
            denom = 1.0 - np.abs(_vertex(disc, at.mu).values[:, 0]) ** 2
        vals = num.values / denom[:, None]
        mu_field = Field(num.kind, vals, "vertex", disc)
        mu_field = _pullback_beltrami(disc, mu_field, chi1)
        mu_out = project(mu_field, basis_tx)
    else:
        mu_out = None

    # bundle part: nu_1 + (mu_1 - ...) (chi_2^-1 d chi_2), with the gauge
    # factor's first-order value -(at.nu)-dagger
    nu_acc = _vertex(disc, nu1) if nu1 is not None else None
    if num is not None and at.nu is not None:
        gauge = calc.dagger(_vertex(disc, at.nu)) * (-1.0)
        extra = calc.mul_beltrami(Field(num.kind, num.values / (denom[:, None] if at.mu is not None else 1.0), "vertex", disc), gauge)
        nu_acc = extra if nu_acc is None else nu_acc + extra
    if nu_acc is not None:
        nu_out = project(nu_acc, basis_nu)
    else:
        nu_out = None
    return TangentVector(mu=mu_out, nu=nu_out)


def _vertex(disc, f):
    if f.home == "vertex":
        return f
    return disc.to_vertex(f.kind).apply(f)


def _pullback_beltrami(disc, f, chi1):
    """Transport a Beltrami field through the half-plane quotient map chi1.

    The composite disk map is psi = cayley o chi1 o cayley^-1; the tensor
    transport is m(psi(z)) conj(psi')/psi' with psi' by the chain rule (the
    dzbar-mixing of the quasiconformal map enters only at the next order).
    """
    from .surface import cayley_to_disk, cayley_to_half_plane

    z_disk = disc.mesh.vertices
    w = cayley_to_half_plane(z_disk)
    img = chi1.map_points(w)
    chi_w = chi1.dz_at(w)
    c_prime = 2j / (img + 1j) ** 2  # derivative of the half-plane -> disk map
    w_prime = 2j / (1.0 - z_disk) ** 2  # derivative of disk -> half-plane
    psi_prime = c_prime * chi_w * w_prime
    tau = np.conj(psi_prime) / psi_prime
    back = np.asarray(cayley_to_disk(img), dtype=complex)
    vals = disc.evaluate_field_with_walk(f, back)
    vals = vals * tau[:, None]
    return Field(f.kind, vals, "vertex", disc)
