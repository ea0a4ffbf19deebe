"""Flat unitary bundles: surface-group representations and induced holonomy.

A rank-n flat bundle is a unitary representation of the octagon group on C^n.
End E and Ad E fields are stored in components over a Hermitian orthonormal
matrix basis (identity/sqrt(n) plus generalized Gell-Mann matrices), which
makes conjugate-transpose plain conjugation and the holonomy action a real
orthogonal matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import MaxRetriesExceeded, UnsupportedDegree

_GEN_NAMES = ("a1", "b1", "a2", "b2")


@dataclass
class UnitaryRep:
    n: int
    k: int
    images: dict  # generator name -> unitary ndarray
    seed: int

    def image(self, word):
        """Evaluate a generator word (upper case = inverse)."""
        u = np.eye(self.n, dtype=complex)
        for name in word:
            base = self.images[name.lower()]
            u = u @ (base.conj().T if name[0].isupper() else base)
        return u

    def commutator_product(self):
        a1, b1, a2, b2 = (self.images[n] for n in _GEN_NAMES)
        return _comm(a1, b1) @ _comm(a2, b2)

    def conjugated(self, w):
        """The rep with every image conjugated by the fixed unitary w."""
        images = {k: w @ u @ w.conj().T for k, u in self.images.items()}
        return UnitaryRep(n=self.n, k=self.k, images=images, seed=self.seed)

    def to_json(self):
        return {
            "n": self.n,
            "k": self.k,
            "seed": self.seed,
            "images": {
                name: [[[float(x.real), float(x.imag)] for x in row] for row in u]
                for name, u in self.images.items()
            },
        }

    @staticmethod
    def from_json(doc):
        images = {
            name: np.array([[complex(re, im) for re, im in row] for row in u])
            for name, u in doc["images"].items()
        }
        return UnitaryRep(n=int(doc["n"]), k=int(doc["k"]), images=images, seed=int(doc["seed"]))


def _comm(a, b):
    return a @ b @ a.conj().T @ b.conj().T


def _haar_unitary(n, rng):
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    ph = np.diag(r).copy()
    ph /= np.abs(ph)
    return q * ph


def random_unitary_rep(group, n, k, seed, margin_floor=1e-3, max_retries=60):
    """Draw an irreducible unitary rep of the genus-2 group with exact relator.

    A1, B1 are Haar random; the remaining commutator [A2, B2] must equal
    C = [A1, B1]^{-1} exactly, which pins (A2, B2) to the cyclic-shift
    construction in the eigenbasis of C (seeded phase freedom keeps the draw
    random).  A Newton polish removes the eigendecomposition round-off.
    Retries until the irreducibility margin clears ``margin_floor``.
    """
    if k != 0:
        raise UnsupportedDegree(f"only degree k = 0 is supported, got k = {k}")
    if n not in (1, 2, 3):
        raise UnsupportedDegree(f"rank must be 1, 2 or 3, got {n}")

    rng = np.random.default_rng(seed)
    if n == 1:
        phases = np.exp(2j * np.pi * rng.random(4))
        images = {name: np.array([[p]]) for name, p in zip(_GEN_NAMES, phases)}
        return UnitaryRep(n=1, k=0, images=images, seed=seed)

    for _ in range(max_retries):
        a1 = _haar_unitary(n, rng)
        b1 = _haar_unitary(n, rng)
        c = np.linalg.inv(_comm(a1, b1))
        a2, b2 = _solve_commutator(c, rng)
        a2, b2 = _polish(a2, b2, c)
        rep = UnitaryRep(n=n, k=0, images={"a1": a1, "b1": b1, "a2": a2, "b2": b2}, seed=seed)
        rel, margin = rep_residuals(rep)
        if rel <= 1e-10 and margin >= margin_floor:
            return rep
    raise MaxRetriesExceeded(
        f"no irreducible rep with margin >= {margin_floor} after {max_retries} draws", seed=seed
    )


def _solve_commutator(c, rng):
    """Unitaries (a, b) with a b a* b* = c, via the cyclic-shift construction."""
    n = c.shape[0]
    evals, v = np.linalg.eig(c)
    evals /= np.abs(evals)
    v, _ = np.linalg.qr(v)  # re-orthonormalize eigenbasis
    # q_i / q_{i-1} = d_i, consistent because det c = 1
    q = np.ones(n, dtype=complex)
    for i in range(1, n):
        q[i] = q[i - 1] * evals[i]
    perm = np.zeros((n, n), dtype=complex)
    for i in range(n):
        perm[(i + 1) % n, i] = 1.0
    u = np.exp(2j * np.pi * rng.random(n))
    a = v @ np.diag(q) @ v.conj().T
    b = v @ (np.diag(u) @ perm @ np.diag(u.conj())) @ v.conj().T
    return a, b


def _project_unitary(m):
    u, _, vh = np.linalg.svd(m)
    return u @ vh


def _polish(a, b, c, iters=8):
    """Gauss-Newton on (a, b) for a b a* b* = c, staying on the unitary group."""
    for _ in range(iters):
        r = _comm(a, b) - c
        res = np.abs(r).max()
        if res < 1e-14:
            break
        # first-order update: perturb a <- (I + X) a, b <- (I + Y) b with
        # anti-Hermitian X, Y; solve the linearization in the least-squares sense.
        n = a.shape[0]
        basis = _antihermitian_basis(n)
        cols = []
        for x in basis:
            da = x @ a
            cols.append(_dcomm(a, b, da, np.zeros_like(b)).ravel())
        for y in basis:
            db = y @ b
            cols.append(_dcomm(a, b, np.zeros_like(a), db).ravel())
        jac = np.column_stack(cols)
        coef, *_ = np.linalg.lstsq(
            np.vstack([jac.real, jac.imag]), -np.concatenate([r.ravel().real, r.ravel().imag]),
            rcond=None,
        )
        m = len(basis)
        x = sum(t * e for t, e in zip(coef[:m], basis))
        y = sum(t * e for t, e in zip(coef[m:], basis))
        a = _project_unitary((np.eye(n) + x) @ a)
        b = _project_unitary((np.eye(n) + y) @ b)
    return a, b


def _dcomm(a, b, da, db):
    """Derivative of a b a* b* along (da, db)."""
    ah, bh = a.conj().T, b.conj().T
    return (
        da @ b @ ah @ bh
        + a @ db @ ah @ bh
        + a @ b @ da.conj().T @ bh
        + a @ b @ ah @ db.conj().T
    )


def _antihermitian_basis(n):
    out = []
    for i in range(n):
        m = np.zeros((n, n), dtype=complex)
        m[i, i] = 1j
        out.append(m)
    for i in range(n):
        for j in range(i + 1, n):
            m = np.zeros((n, n), dtype=complex)
            m[i, j] = 1.0
            m[j, i] = -1.0
            out.append(m)
            m = np.zeros((n, n), dtype=complex)
            m[i, j] = 1j
            m[j, i] = 1j
            out.append(m)
    return out


def rep_residuals(rep):
    """(relator residual, irreducibility margin).

    The margin is the second-smallest eigenvalue of the commutant operator
    sum_g (I - conj(U_g) (x) U_g)^H (...); its kernel is the commutant, so the
    margin vanishes exactly when a nonscalar commuting matrix exists.  Rank-1
    reps report +inf (no nonscalar commutant is possible).
    """
    rel = float(np.abs(rep.commutator_product() - np.eye(rep.n)).max())
    if rep.n == 1:
        return rel, float("inf")
    n2 = rep.n * rep.n
    m = np.zeros((n2, n2), dtype=complex)
    eye = np.eye(n2)
    for name in _GEN_NAMES:
        u = rep.images[name]
        kk = eye - np.kron(u, u.conj())  # kernel: U X U* = X
        m += kk.conj().T @ kk
    evals = np.linalg.eigvalsh(m)
    return rel, float(evals[1])


def commutant_dimension(rep, tol=1e-8):
    """Dimension of the kernel of the commutant operator (1 for stable reps)."""
    if rep.n == 1:
        return 1
    n2 = rep.n * rep.n
    m = np.zeros((n2, n2), dtype=complex)
    eye = np.eye(n2)
    for name in _GEN_NAMES:
        u = rep.images[name]
        kk = eye - np.kron(u, u.conj())
        m += kk.conj().T @ kk
    evals = np.linalg.eigvalsh(m)
    return int(np.sum(evals < tol))


# ---------------------------------------------------------------------------
# Component bundles
# ---------------------------------------------------------------------------


def hermitian_basis(n):
    """Orthonormal Hermitian basis of n x n matrices, identity direction first."""
    out = [np.eye(n, dtype=complex) / np.sqrt(n)]
    for i in range(n):
        for j in range(i + 1, n):
            m = np.zeros((n, n), dtype=complex)
            m[i, j] = m[j, i] = 1.0 / np.sqrt(2.0)
            out.append(m)
            m = np.zeros((n, n), dtype=complex)
            m[i, j] = -1j / np.sqrt(2.0)
            m[j, i] = 1j / np.sqrt(2.0)
            out.append(m)
    for k in range(1, n):
        m = np.zeros((n, n), dtype=complex)
        for i in range(k):
            m[i, i] = 1.0
        m[k, k] = -float(k)
        m /= np.sqrt(k * (k + 1))
        out.append(m)
    return out


@dataclass
class HolonomyAction:
    """Holonomy of one of the induced bundles in a fixed component basis."""

    kind: str  # trivial | fundamental | EndE | AdE
    dim: int
    rep: UnitaryRep | None
    basis: list | None  # component basis matrices for EndE / AdE
    generator_mats: dict  # generator name -> dim x dim matrix

    def word_matrix(self, word):
        m = np.eye(self.dim, dtype=complex)
        for name in word:
            base = self.generator_mats[name.lower()]
            m = m @ (base.conj().T if name[0].isupper() else base)
        return m

    def unitary_defect(self):
        return max(
            float(np.abs(g.conj().T @ g - np.eye(self.dim)).max())
            for g in self.generator_mats.values()
        )


def holonomy_action(rep, kind):
    """Build the holonomy matrices of the requested induced bundle."""
    if kind == "trivial":
        mats = {name: np.eye(1, dtype=complex) for name in _GEN_NAMES}
        return HolonomyAction(kind=kind, dim=1, rep=rep, basis=None, generator_mats=mats)
    if kind == "fundamental":
        mats = {name: rep.images[name].copy() for name in _GEN_NAMES}
        return HolonomyAction(kind=kind, dim=rep.n, rep=rep, basis=None, generator_mats=mats)
    if kind not in ("EndE", "AdE"):
        raise ValueError(f"unknown bundle kind {kind!r}")
    full = hermitian_basis(rep.n)
    basis = full if kind == "EndE" else full[1:]
    d = len(basis)
    mats = {}
    for name in _GEN_NAMES:
        u = rep.images[name]
        m = np.empty((d, d), dtype=complex)
        for jj, ej in enumerate(basis):
            for kk_, ek in enumerate(basis):
                m[jj, kk_] = np.trace(ej @ u @ ek @ u.conj().T)
        mats[name] = m
    return HolonomyAction(kind=kind, dim=d, rep=rep, basis=basis, generator_mats=mats)


@dataclass
class MatrixAlgebra:
    """Structure tensors of End E in the Hermitian component basis."""

    n: int
    basis: list
    bracket: np.ndarray  # f[j, k, l]: [E_k, E_l] = sum_j f[j,k,l] E_j
    product: np.ndarray  # p[j, k, l]: E_k E_l = sum_j p[j,k,l] E_j
    identity: np.ndarray  # components of the identity matrix

    def ad(self, x, y):
        """Components of [X, Y]; x, y are (..., d) component arrays."""
        return np.einsum("jkl,...k,...l->...j", self.bracket, x, y)

    def mat_trace(self, x):
        """Matrix trace of a component vector (only the identity direction counts)."""
        return x[..., 0] * np.sqrt(self.n)

    def pair_trace(self, x, y):
        """tr(X Y) = sum_k x_k y_k for Hermitian orthonormal bases."""
        return np.einsum("...k,...k->...", x, y)


def matrix_algebra(n):
    basis = hermitian_basis(n)
    d = len(basis)
    bracket = np.zeros((d, d, d), dtype=complex)
    product = np.zeros((d, d, d), dtype=complex)
    for kk in range(d):
        for ll in range(d):
            pr = basis[kk] @ basis[ll]
            br = pr - basis[ll] @ basis[kk]
            for jj in range(d):
                product[jj, kk, ll] = np.trace(basis[jj] @ pr)
                bracket[jj, kk, ll] = np.trace(basis[jj] @ br)
    ident = np.zeros(d, dtype=complex)
    ident[0] = np.sqrt(n)
    return MatrixAlgebra(n=n, basis=basis, bracket=bracket, product=product, identity=ident)


def save_rep(rep, path):
    with open(path, "w") as fh:
        json.dump(rep.to_json(), fh, sort_keys=True)


def load_rep(path):
    with open(path) as fh:
        return UnitaryRep.from_json(json.load(fh))
