"""Quasiconformal realization of the coordinate deformations.

The modified Beltrami coefficient scale*mu - scale^2/2 density^-1 tr(nu nu)
is sampled equivariantly on a grid, extended by zero outside a truncation
radius, and the normal solution of dbar(chi) = m d(chi) is produced by the
Neumann series h = m + m B[h] with the Beurling transform evaluated by FFT
convolution; chi = z + C[h] with the Cauchy transform.  The solver grid
lives in the bounded disk chart; the three-point normalization that pins
0, 1 and infinity on the half-plane boundary is applied exactly through the
Cayley identification, and all public sampling is half-plane facing.

First-order operator families are realized directly on the fixed discrete
surface: the dbar family is affine in the deformation, and the adjoint
family is its exact mass adjoint, so the closed-form derivatives hold by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import calculus as calc
from .calculus import Field, FormKind
from .errors import (
    EllipticityViolated,
    FitResidualTooLarge,
    GridTooCoarse,
    KindMismatch,
    SeriesDiverged,
)
from .surface import (
    FuchsianGroup,
    MoebiusTransform,
    cayley_to_disk,
    cayley_to_half_plane,
    hyperbolic_distance,
)

_GEN_NAMES = ("a1", "b1", "a2", "b2")


@dataclass
class BeltramiCoefficient:
    """Disk-chart grid samples of a deformation coefficient, zero outside
    the truncation radius."""

    grid_x: np.ndarray
    grid_y: np.ndarray
    values: np.ndarray  # (ny, nx) complex
    sup_norm: float
    trunc_radius: float
    equivariance_residual: float
    disc: object | None = None

    @property
    def spacing(self):
        return float(self.grid_x[1] - self.grid_x[0]), float(self.grid_y[1] - self.grid_y[0])


@dataclass
class MappingGrid:
    """Solution samples of the coefficient's quasiconformal map.

    chi/dchi/dbchi live on the disk-chart grid; the stored normalizer is the
    disk Moebius transform that corresponds to pinning 0, 1, infinity on the
    half-plane boundary.  map_points / dz_at / dzbar_at take and return
    half-plane coordinates.
    """

    coeff: BeltramiCoefficient
    chi: np.ndarray
    dchi: np.ndarray  # d(chi)/dz = 1 + B[h]
    dbchi: np.ndarray  # d(chi)/dzbar = h
    normalizer: MoebiusTransform
    iterations: int
    residual_estimate: float
    pinned_residual: float
    residual_field: np.ndarray = dc_field(repr=False, default=None)

    def _interp(self, arr, z):
        gx, gy = self.coeff.grid_x, self.coeff.grid_y
        dx = gx[1] - gx[0]
        dy = gy[1] - gy[0]
        x = (np.real(z) - gx[0]) / dx
        y = (np.imag(z) - gy[0]) / dy
        i = np.clip(np.floor(x).astype(int), 0, len(gx) - 2)
        j = np.clip(np.floor(y).astype(int), 0, len(gy) - 2)
        tx = np.clip(x - i, 0.0, 1.0)
        ty = np.clip(y - j, 0.0, 1.0)
        return (
            arr[j, i] * (1 - tx) * (1 - ty)
            + arr[j, i + 1] * tx * (1 - ty)
            + arr[j + 1, i] * (1 - tx) * ty
            + arr[j + 1, i + 1] * tx * ty
        )

    def map_points(self, w):
        """Apply the normalized map to half-plane points."""
        w = np.asarray(w, dtype=complex)
        z = cayley_to_disk(w)
        img = self._interp(self.chi, z)
        img = self.normalizer(img)
        return np.asarray(cayley_to_half_plane(img), dtype=complex)

    def map_points_exact(self, w):
        """Like map_points but with the Cauchy transform summed directly.

        Avoids grid interpolation of z + C[h]; used where Moebius fits need
        the full quadrature accuracy.
        """
        w = np.asarray(w, dtype=complex)
        z = cayley_to_disk(w)
        dx, dy = self.coeff.spacing
        zz = self.coeff.grid_x[None, :] + 1j * self.coeff.grid_y[:, None]
        mask = self.dbchi != 0
        h = self.dbchi[mask]
        src = zz[mask]
        img = np.empty_like(z)
        flat = z.ravel()
        out = np.empty_like(flat)
        block = 64
        for i0 in range(0, len(flat), block):
            zs = flat[i0 : i0 + block]
            out[i0 : i0 + block] = (dx * dy / np.pi) * np.sum(
                h[None, :] / (zs[:, None] - src[None, :]), axis=1
            )
        img = z + out.reshape(z.shape)
        img = self.normalizer(img)
        return np.asarray(cayley_to_half_plane(img), dtype=complex)

    def _disk_derivs(self, z):
        dz = self._interp(self.dchi, z)
        dzb = self._interp(self.dbchi, z)
        np_img = self._interp(self.chi, z)
        mprime = self.normalizer.deriv(np_img)
        return mprime * dz, mprime * dzb, self.normalizer(np_img)

    def dz_at(self, w):
        """d(chi_H)/dw at half-plane points (chain rule through the charts)."""
        w = np.asarray(w, dtype=complex)
        z = cayley_to_disk(w)
        ddz, _, img = self._disk_derivs(z)
        c_prime = 2j / (w + 1j) ** 2  # half-plane -> disk
        w_prime = 2j / (1.0 - img) ** 2  # disk -> half-plane at the image
        return w_prime * ddz * c_prime

    def dzbar_at(self, w):
        w = np.asarray(w, dtype=complex)
        z = cayley_to_disk(w)
        _, ddzb, img = self._disk_derivs(z)
        c_prime = 2j / (w + 1j) ** 2
        w_prime = 2j / (1.0 - img) ** 2
        return w_prime * ddzb * np.conj(c_prime)

    def beltrami_residual(self, w):
        """|dbar chi - m d chi| at half-plane points (chart invariant form)."""
        w = np.asarray(w, dtype=complex)
        z = cayley_to_disk(w)
        m = self._interp(self.coeff.values, z)
        ddz = self._interp(self.dchi, z)
        ddzb = self._interp(self.dbchi, z)
        return np.abs(ddzb - m * ddz)

    def to_header(self):
        return {
            "grid_n": [len(self.coeff.grid_x), len(self.coeff.grid_y)],
            "bounds": [
                float(self.coeff.grid_x[0]),
                float(self.coeff.grid_x[-1]),
                float(self.coeff.grid_y[0]),
                float(self.coeff.grid_y[-1]),
            ],
            "spacing": list(self.coeff.spacing),
            "iterations": self.iterations,
            "residual": self.residual_estimate,
            "pinned_residual": self.pinned_residual,
            "trunc_radius": self.coeff.trunc_radius,
        }


def modified_coefficient(tv, scale, disc=None, n_grid=384, trunc_radius=3.2, window=1.03):
    """Sample scale*mu - (scale^2/2) density^-1 tr(nu (x) nu) on the solver grid.

    The field is transported to every group translate of the fundamental
    domain inside the truncation radius and extended by zero outside.
    """
    if disc is None:
        disc = (tv.mu or tv.nu).disc
    mesh = disc.mesh

    parts = []
    if tv.mu is not None:
        mu = tv.mu if tv.mu.home == "vertex" else disc.to_vertex(tv.mu.kind).apply(tv.mu)
        if mu.kind.degree != "beltrami":
            raise KindMismatch(f"mu part must be a Beltrami field, got {mu.kind}")
        sup_mu = float(np.abs(mu.values).max())
        if scale * sup_mu >= 0.5:
            raise EllipticityViolated(
                f"scale * sup|mu| = {scale * sup_mu:.3f} must stay below 0.5"
            )
        parts.append(mu * scale)
    if tv.nu is not None:
        nu = tv.nu if tv.nu.home == "vertex" else disc.to_vertex(tv.nu.kind).apply(tv.nu)
        corr = calc.beltrami_from_nu_pair(nu, nu)
        parts.append(corr * (-0.5 * scale * scale))
    if not parts:
        field = disc.field(FormKind("beltrami", "trivial"))
    else:
        field = parts[0]
        for p in parts[1:]:
            field = field + p

    gx = np.linspace(-window, window, n_grid)
    gy = np.linspace(-window, window, n_grid)
    zz = gx[None, :] + 1j * gy[:, None]
    dist = np.where(np.abs(zz) < 0.999, hyperbolic_distance(zz, np.zeros_like(zz)), np.inf)
    mask = dist <= trunc_radius
    vals = np.zeros_like(zz)
    pts = zz[mask]
    if pts.size:
        sampled = disc.evaluate_field_with_walk(field, pts)[:, 0]
        vals[mask] = sampled
    sup = float(np.abs(vals).max())
    if sup >= 1.0:
        raise EllipticityViolated(f"sampled coefficient has sup norm {sup:.3f} >= 1")

    eq_res = _equivariance_probe(disc, field, trunc_radius)
    return BeltramiCoefficient(
        grid_x=gx,
        grid_y=gy,
        values=vals,
        sup_norm=sup,
        trunc_radius=trunc_radius,
        equivariance_residual=eq_res,
        disc=disc,
    )


def _equivariance_probe(disc, field, trunc_radius, n_probe=64):
    """Residual of the Beltrami transport law between random translate pairs."""
    rng = np.random.default_rng(0)
    group = disc.mesh.group
    r = np.sqrt(rng.random(n_probe)) * 0.55
    th = 2 * np.pi * rng.random(n_probe)
    z = r * np.exp(1j * th)
    worst = 0.0
    for name in _GEN_NAMES:
        g = group.generators[name]
        zg = g(z)
        keep = hyperbolic_distance(zg, np.zeros_like(zg)) <= trunc_radius
        if not np.any(keep):
            continue
        v0 = disc.evaluate_field_with_walk(field, z[keep])[:, 0]
        v1 = disc.evaluate_field_with_walk(field, zg[keep])[:, 0]
        gp = np.asarray(g.deriv(z[keep]), dtype=complex)
        pred = v0 * gp / np.conj(gp)
        worst = max(worst, float(np.abs(v1 - pred).max()))
    return worst


def constant_ball_coefficient(c, ball_radius=0.45, n_grid=384, window=1.03):
    """Test coefficient: the constant c on a Euclidean ball around the origin."""
    gx = np.linspace(-window, window, n_grid)
    gy = np.linspace(-window, window, n_grid)
    zz = gx[None, :] + 1j * gy[:, None]
    vals = np.where(np.abs(zz) <= ball_radius, c, 0.0).astype(complex)
    return BeltramiCoefficient(
        grid_x=gx,
        grid_y=gy,
        values=vals,
        sup_norm=float(abs(c)),
        trunc_radius=float(ball_radius),
        equivariance_residual=0.0,
    )


def _fft_kernels(nx, ny, dx, dy, pad=2):
    px, py = pad * nx, pad * ny
    kx = 2 * np.pi * np.fft.fftfreq(px, d=dx)
    ky = 2 * np.pi * np.fft.fftfreq(py, d=dy)
    kc = kx[None, :] + 1j * ky[:, None]
    beurling = np.where(np.abs(kc) > 0, np.conj(kc) / np.where(kc == 0, 1, kc), 0.0)
    # Cauchy kernel 1/(pi z) sampled on the padded difference grid
    x = dx * (np.arange(px) - px // 2)
    y = dy * (np.arange(py) - py // 2)
    zz = x[None, :] + 1j * y[:, None]
    ck = np.where(np.abs(zz) > 0, 1.0 / (np.pi * np.where(zz == 0, 1, zz)), 0.0)
    ck_hat = np.fft.fft2(np.fft.ifftshift(ck)) * (dx * dy)
    return beurling, ck_hat, px, py


def solve_beltrami(coeff, max_iter=200, tol=1e-11, pad=2):
    """Normal solution of the Beltrami equation on the coefficient grid.

    Neumann series h = m (1 + B h); chi = z + C h; then the unique Moebius
    renormalization pinning the three boundary points that correspond to
    0, 1, infinity of the half-plane.
    """
    m = coeff.values
    ny, nx = m.shape
    dx, dy = coeff.spacing
    if nx < 32 or ny < 32:
        raise GridTooCoarse(f"{nx} x {ny} grid is too coarse for the transform quadrature")
    beurling, ck_hat, px, py = _fft_kernels(nx, ny, dx, dy, pad)

    def b_apply(f):
        buf = np.zeros((py, px), dtype=complex)
        buf[:ny, :nx] = f
        out = np.fft.ifft2(np.fft.fft2(buf) * beurling)
        return out[:ny, :nx]

    h = m.copy()
    trace = []
    increment = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        h_new = m * (1.0 + b_apply(h))
        increment = float(np.abs(h_new - h).max())
        trace.append(increment)
        h = h_new
        if increment < tol:
            break
    if increment >= max(tol, 1e2 * tol):
        if increment > 1e-8:
            raise SeriesDiverged(
                f"series increment {increment:.2e} after {it} iterations "
                f"(sup|m| = {coeff.sup_norm:.3f})",
                trace=trace,
            )

    dchi = 1.0 + b_apply(h)
    residual_field = np.abs(h - m * dchi)
    res_est = float(residual_field.max())

    # chi = z + C[h]
    buf = np.zeros((py, px), dtype=complex)
    buf[:ny, :nx] = h
    ch = np.fft.ifft2(np.fft.fft2(buf) * ck_hat)[:ny, :nx]
    zz = coeff.grid_x[None, :] + 1j * coeff.grid_y[:, None]
    chi = zz + ch

    # normalization: pin the images of the boundary points that are
    # 0, 1, infinity in the half-plane chart
    targets = np.asarray(cayley_to_disk(np.array([0.0, 1.0, np.inf])), dtype=complex)
    targets[2] = 1.0 + 0.0j  # cayley(inf)
    imgs = np.array([_cauchy_direct(h, coeff, t) + t for t in targets])
    normalizer = _mobius_three_points(imgs, targets)
    pin = float(np.abs(normalizer(imgs) - targets).max())

    return MappingGrid(
        coeff=coeff,
        chi=chi,
        dchi=dchi,
        dbchi=h,
        normalizer=normalizer,
        iterations=it,
        residual_estimate=res_est,
        pinned_residual=pin,
        residual_field=residual_field,
    )


def _cauchy_direct(h, coeff, z0):
    """C[h](z0) by direct quadrature (used off the grid, e.g. on the boundary)."""
    dx, dy = coeff.spacing
    zz = coeff.grid_x[None, :] + 1j * coeff.grid_y[:, None]
    mask = h != 0
    if not np.any(mask):
        return 0.0 + 0.0j
    diffs = z0 - zz[mask]
    return complex(np.sum(h[mask] / diffs) * dx * dy / np.pi)


def _mobius_three_points(src, dst):
    """The Moebius transform with src[k] -> dst[k] (disk model matrices)."""

    def to_standard(tri):
        z1, z2, z3 = tri
        return np.array(
            [[z2 - z3, -z1 * (z2 - z3)], [z2 - z1, -z3 * (z2 - z1)]], dtype=complex
        )

    a = to_standard(src)
    b = to_standard(dst)
    return MoebiusTransform(np.linalg.inv(b) @ a, "disk")


def deformed_generators(mapping, group, n_samples=60, fit_tol=5e-3):
    """Fit chi o gamma o chi^-1 by Moebius transforms for each generator.

    Returns (FuchsianGroup, max fit residual).  The fit is a homogeneous
    least-squares problem over a sample cloud spread through the fundamental
    domain; its condition is reported through the singular value gap.
    """
    rings = [(0.25, 12), (0.45, 16), (0.62, 16), (0.75, 16)]
    pts = []
    for radius, count in rings:
        theta = 2 * np.pi * (np.arange(count) + 0.35) / count
        pts.append(radius * np.exp(1j * theta))
    z = np.concatenate(pts)[: max(n_samples, 20)]
    w_src = cayley_to_half_plane(z)

    gens = {}
    worst = 0.0
    for name in _GEN_NAMES:
        gamma = group.generators[name]
        zg = gamma(z)
        w_img = cayley_to_half_plane(zg)
        u = np.asarray(cayley_to_disk(mapping.map_points_exact(w_src)), dtype=complex)
        v = np.asarray(cayley_to_disk(mapping.map_points_exact(w_img)), dtype=complex)
        rows = np.column_stack([u, np.ones_like(u), -u * v, -v])
        _, s, vh = np.linalg.svd(rows)
        cand = vh[-1].conj()
        mat = np.array([[cand[0], cand[1]], [cand[2], cand[3]]], dtype=complex)
        fitted = MoebiusTransform(mat, "disk")
        # unit-determinant matrices carry a sign ambiguity; stay near the
        # undeformed generator
        if np.abs(fitted.mat - gamma.mat).max() > np.abs(fitted.mat + gamma.mat).max():
            fitted = MoebiusTransform(-fitted.mat, "disk", normalize=False)
        res = float(np.abs(fitted(u) - v).max())
        worst = max(worst, res)
        if res > fit_tol:
            raise FitResidualTooLarge(
                f"generator {name}: Moebius fit residual {res:.2e} exceeds {fit_tol:.1e}"
            )
        gens[name] = fitted
    fitted_group = FuchsianGroup(genus=2, generators=gens, relator=list(group.relator),
                                 octagon=group.octagon)
    return fitted_group, worst


# ---------------------------------------------------------------------------
# First-order operator families
# ---------------------------------------------------------------------------


@dataclass
class OperatorDerivative:
    direction: object  # TangentVector
    which: str
    operator: calc.DiscreteOperator


def _ad_matrix(disc, nu_cell, dom_kind):
    """Sparse matrix of s -> [nu, s] from vertex sections to cell (0,1)-forms."""
    import scipy.sparse as sp

    alg = disc.algebra
    d = disc.fiber_dim("EndE")
    nt = disc.mesh.n_triangles
    interp = disc.interp(dom_kind)
    blocks = np.einsum("jlk,tl->tjk", alg.bracket, nu_cell)
    rows, cols, vals = [], [], []
    for t in range(nt):
        blk = blocks[t]
        for a in range(d):
            for b in range(d):
                if blk[a, b] != 0:
                    rows.append(t * d + a)
                    cols.append(t * d + b)
                    vals.append(blk[a, b])
    pointwise = sp.csr_matrix((vals, (rows, cols)), shape=(nt * d, nt * d))
    mat = pointwise @ interp.mat
    return calc.DiscreteOperator(
        mat.tocsr(), interp.dom, (FormKind("(0,1)", "EndE"), "cell"), disc, "ad(nu)"
    )


def _mu_partial_matrix(disc, mu_cell, dom_kind):
    """Sparse matrix of s -> mu d(s) from vertex sections to cell (0,1)-forms."""
    import scipy.sparse as sp

    part = disc.partial(dom_kind)
    d = disc.fiber_dim(dom_kind.bundle)
    scal = sp.diags(np.repeat(mu_cell, d))
    mat = scal @ part.mat
    return calc.DiscreteOperator(
        mat.tocsr(), part.dom, (FormKind("(0,1)", dom_kind.bundle), "cell"), disc, "mu d"
    )


def dbar_family(direction, disc, eps):
    """The one-parameter family dbar + ad(eps nu) - m(eps) d on End E sections.

    m(eps) = eps mu - (eps^2/2) density^-1 tr(nu nu): exactly the modified
    coefficient, so the eps-derivative at zero is ad(nu) - mu d by
    construction.
    """
    dom = FormKind("function", "EndE")
    base = disc.dbar(dom)
    terms = [base]
    if direction.nu is not None:
        nu_cell = _to_cell_embedded(disc, direction.nu)
        terms.append(_ad_matrix(disc, eps * nu_cell, dom))
    m_cell = _coeff_cell(disc, direction, eps)
    if m_cell is not None:
        terms.append(_mu_partial_matrix(disc, -m_cell, dom))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def _coeff_cell(disc, direction, eps):
    parts = []
    if direction.mu is not None:
        mu = direction.mu if direction.mu.home == "cell" else disc.interp(direction.mu.kind).apply(direction.mu)
        parts.append(eps * mu.values[:, 0])
    if direction.nu is not None:
        nu = direction.nu if direction.nu.home == "cell" else disc.interp(direction.nu.kind).apply(direction.nu)
        corr = calc.beltrami_from_nu_pair(nu, nu)
        parts.append(-0.5 * eps * eps * corr.values[:, 0])
    if not parts:
        return None
    return sum(parts)


def _to_cell_embedded(disc, nu):
    nu_c = nu if nu.home == "cell" else disc.interp(nu.kind).apply(nu)
    if nu_c.kind.bundle == "AdE":
        vals = np.zeros((nu_c.values.shape[0], disc.fiber_dim("EndE")), dtype=complex)
        vals[:, 1:] = nu_c.values
        return vals
    return nu_c.values


def operator_derivative(direction, which, disc=None):
    """Closed-form first derivatives of the deformation families (assembled).

    dbar_sections: ad(nu) - mu d; dbar_forms and dbarstar_sections vanish;
    dbarstar_forms: -(star ad(nu) star) - d* mu-bar, realized as the exact
    adjoint of the sections derivative.
    """
    if disc is None:
        disc = (direction.mu or direction.nu).disc
    import scipy.sparse as sp

    dom = FormKind("function", "EndE")
    if which == "dbar_sections":
        terms = []
        if direction.nu is not None:
            terms.append(_ad_matrix(disc, _to_cell_embedded(disc, direction.nu), dom))
        if direction.mu is not None:
            mu_c = direction.mu if direction.mu.home == "cell" else disc.interp(direction.mu.kind).apply(direction.mu)
            terms.append(_mu_partial_matrix(disc, -mu_c.values[:, 0], dom))
        if not terms:
            op = calc.DiscreteOperator(
                sp.csr_matrix((disc.mesh.n_triangles * disc.fiber_dim("EndE"),
                               disc.n_reduced * disc.fiber_dim("EndE")), dtype=complex),
                (dom, "vertex"), (FormKind("(0,1)", "EndE"), "cell"), disc, "0",
            )
        else:
            op = terms[0]
            for t in terms[1:]:
                op = op + t
        return OperatorDerivative(direction, which, op)
    if which == "dbarstar_forms":
        inner = operator_derivative(direction, "dbar_sections", disc).operator
        return OperatorDerivative(direction, which, inner.adjoint())
    if which in ("dbar_forms", "dbarstar_sections"):
        cod = (FormKind("2form", "EndE"), "cell") if which == "dbar_forms" else (dom, "vertex")
        dom_sp = (FormKind("(0,1)", "EndE"), "cell")
        n_dom = disc.mesh.n_triangles * disc.fiber_dim("EndE")
        n_cod = (disc.mesh.n_triangles if cod[1] == "cell" else disc.n_reduced) * disc.fiber_dim("EndE")
        op = calc.DiscreteOperator(
            sp.csr_matrix((n_cod, n_dom), dtype=complex), dom_sp, cod, disc, "0"
        )
        return OperatorDerivative(direction, which, op)
    raise KindMismatch(f"unknown derivative selector {which!r}")
