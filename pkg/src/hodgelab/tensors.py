"""Term-pipeline evaluators for the closed tensor formulas.

Every displayed integral is shipped as one term record in a versioned JSON
document (formulas/): a signed coefficient plus a pipeline of typed primitive
tokens over the slots mu1..mu4, nu1..nu4.  The evaluator walks pipelines with
kind checking, caches slot-independent prefixes (Green solves in particular),
and keeps a per-term breakdown so sign/conjugation variants can be audited
without re-deriving anything.

Conventions fixed here once and used everywhere:
  * pairings "i int tr(a ^ b-bar-T)" are the positive mass pairings of the
    calculus module (cell quadrature),
  * a (1,1)-form is represented by the matrix of its sesquilinear values on
    the holomorphic basis, so Kaehler forms of the base metric are Gram
    matrices and "omega(x1, x2)" in a display reads as <x1, x2>,
  * second variations of log-determinants are matrices in the same encoding,
    which makes the Ricci-potential identity a plain matrix equation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from importlib import resources

import numpy as np

from . import calculus as calc
from . import harmonic as harm
from .calculus import Field, FormKind
from .errors import KindMismatch

TWO_PI = 2.0 * np.pi


@dataclass
class TensorConfig:
    shift: float = 0.5  # resolvent shift in the metric Hessian term
    delta0c_mode: str = "functions"  # reading of the complex-function resolvent
    audit: bool = False

    def to_json(self):
        return {"shift": self.shift, "delta0c_mode": self.delta0c_mode, "audit": self.audit}


@dataclass
class TensorResult:
    label: str
    axes: dict
    entries: np.ndarray
    terms: dict
    meta: dict = dc_field(default_factory=dict)

    def to_json(self):
        def conv(a):
            a = np.asarray(a)
            return [list(map(float, row)) for row in np.column_stack([a.real.ravel(), a.imag.ravel()])]

        return {
            "label": self.label,
            "axes": self.axes,
            "shape": list(np.asarray(self.entries).shape),
            "entries": conv(self.entries),
            "terms": {k: conv(v) for k, v in self.terms.items()},
            "meta": self.meta,
        }


_FORMULA_CACHE = {}


def load_formula(name):
    if name not in _FORMULA_CACHE:
        text = resources.files("hodgelab.formulas").joinpath(f"{name}.json").read_text()
        _FORMULA_CACHE[name] = json.loads(text)
    return _FORMULA_CACHE[name]


# ---------------------------------------------------------------------------
# chain evaluation
# ---------------------------------------------------------------------------


class ChainContext:
    """Slot bindings plus evaluation caches for one (slot1, slot2) setting."""

    def __init__(self, disc, bases, config, slots=None):
        self.disc = disc
        self.bases = bases  # {"TX": basis, "EndE": basis}
        self.config = config
        self.slots = dict(slots or {})
        self.cache = {}

    def bind(self, **kw):
        self.slots.update(kw)

    def slot(self, name):
        return self.slots.get(name)


_SLOT34 = ("mu3", "mu4", "nu3", "nu4")


def _chain_uses_slot34(step):
    blob = json.dumps(step)
    return any(s in blob for s in _SLOT34)


def eval_chain(ctx, chain, chain_id=None):
    """Evaluate a pipeline; returns a Field or None (a structurally-zero value)."""
    if chain_id is None:
        chain_id = id(chain)
    value = None
    start = 0
    cacheable = True
    # resume from the longest cached slot-independent prefix
    for k in range(len(chain), 0, -1):
        key = (chain_id, k)
        if key in ctx.cache:
            value, cacheable = ctx.cache[key]
            start = k
            break
    for k in range(start, len(chain)):
        step = chain[k]
        value = _apply_step(ctx, value, step)
        if cacheable and _chain_uses_slot34(step):
            cacheable = False
        if cacheable:
            ctx.cache[(chain_id, k + 1)] = (value, cacheable)
    return value


def _to_home(disc, f, home):
    if f is None or f.home == home:
        return f
    if home == "cell":
        return disc.interp(f.kind).apply(f)
    return disc.to_vertex(f.kind).apply(f)


def _apply_step(ctx, value, step):
    disc = ctx.disc
    if "start" in step:
        name = step["start"]
        if name == "basis":
            return ctx.slot("basis")
        if name == "mu_pair":
            a, b = ctx.slot(step["i"]), ctx.slot(step["j"])
            if a is None or b is None:
                return None
            a = _to_home(disc, a, "vertex")
            b = _to_home(disc, b, "vertex")
            return calc.mu_pair(a, b)
        return ctx.slot(name)

    op = step["op"]

    if op == "add_chain":
        piece = eval_chain(ctx, step["chain"], chain_id=id(step["chain"]))
        if piece is None:
            return value
        c = complex(*step.get("coeff", [1.0, 0.0]))
        piece = piece * c
        if value is None:
            return piece
        piece = _to_home(disc, piece, value.home)
        return value + piece

    if value is None:
        return None

    if op == "scale":
        return value * complex(*step["value"])
    if op == "dagger":
        return calc.dagger(value)
    if op == "star":
        return disc.star(value.kind, value.home)(value)
    if op == "dbar":
        v = _to_home(disc, value, "vertex")
        return disc.dbar(v.kind).apply(v)
    if op == "partial":
        v = _to_home(disc, value, "vertex")
        return disc.partial(v.kind).apply(v)
    if op == "nabla":
        v = _to_home(disc, value, "vertex")
        return disc.nabla(v.kind).apply(v)
    if op == "dbar_star":
        v = _to_home(disc, value, "cell")
        dom = FormKind("function", v.kind.bundle)
        return disc.dbar(dom).adjoint().apply(v)
    if op == "partial_star":
        v = _to_home(disc, value, "cell")
        dom = FormKind("function", v.kind.bundle)
        return disc.partial(dom).adjoint().apply(v)
    if op == "nabla_star":
        v = _to_home(disc, value, "cell")
        dom = FormKind("vector", v.kind.bundle)
        return disc.nabla(dom).adjoint().apply(v)
    if op == "green":
        v = _to_home(disc, value, "vertex")
        shift = step.get("shift", 0.0)
        if shift == "cfg":
            shift = ctx.config.shift
        flavor = step.get("flavor", "dbar")
        target = {
            "EndE": FormKind("function", "EndE"),
            "AdE": FormKind("function", "AdE"),
            "trivial": FormKind("function", "trivial"),
            "vector": FormKind("vector", "trivial"),
        }[step["bundle"]]
        if v.kind != target:
            v = _cast_bundle(disc, v, target)
        return disc.green_apply(target, v, float(shift), flavor)
    if op in ("mul_mu", "mul_mu_conj"):
        mu = ctx.slot(step["slot"])
        if mu is None:
            return None
        mu = _to_home(disc, mu, value.home)
        return calc.mul_beltrami(mu, value) if op == "mul_mu" else calc.mul_beltrami_conj(mu, value)
    if op == "mul_pair":
        a, b = ctx.slot(step["i"]), ctx.slot(step["j"])
        if a is None or b is None:
            return None
        a = _to_home(disc, a, value.home)
        b = _to_home(disc, b, value.home)
        return calc.mul_scalar(calc.mu_pair(a, b), value)
    if op == "mul_fn":
        fn = eval_chain(ctx, step["chain"], chain_id=id(step["chain"]))
        if fn is None:
            return None
        fn = _to_home(disc, fn, value.home)
        return calc.mul_scalar(fn, value)
    if op == "ad":
        nu = ctx.slot(step["slot"])
        if nu is None:
            return None
        nu = _to_home(disc, nu, value.home)
        return calc.ad_action(nu, value)
    if op == "ad_by":
        x = eval_chain(ctx, step["chain"], chain_id=id(step["chain"]))
        if x is None:
            return None
        x = _to_home(disc, x, value.home)
        return calc.ad_action(x, value)
    if op == "sas":
        nu = ctx.slot(step["slot"])
        if nu is None:
            return None
        v = _to_home(disc, value, nu.home) if nu.home != value.home else value
        return calc.star_ad_star(nu, v)
    if op == "L":
        return _l_operator(ctx, value, step, plus=False)
    if op == "Lplus":
        return _l_operator(ctx, value, step, plus=True)
    if op == "Lstar":
        return _lstar_operator(ctx, value, step)
    if op == "project":
        basis = ctx.bases[step["basis"]]
        return harm.project(value, basis)
    if op == "project_conj":
        basis = ctx.bases[step["basis"]]
        return calc.dagger(harm.project(calc.dagger(value), basis))
    raise KindMismatch(f"unknown pipeline token {op!r}")


def _cast_bundle(disc, f, target):
    """Embed AdE-valued data into EndE (or fail loudly)."""
    if f.kind.bundle == "AdE" and target.bundle == "EndE":
        vals = np.zeros((f.values.shape[0], disc.fiber_dim("EndE")), dtype=complex)
        vals[:, 1:] = f.values
        return Field(FormKind(f.kind.degree, "EndE"), vals, f.home, disc)
    if f.kind == target:
        return f
    raise KindMismatch(f"cannot cast {f.kind} to {target}")


def _l_operator(ctx, section, step, plus):
    """ad(nu) - mu d (the first-variation of dbar on sections); Lplus flips mu."""
    disc = ctx.disc
    nu = ctx.slot(step["nu"])
    mu = ctx.slot(step["mu"])
    out = None
    if nu is not None:
        nu = _to_home(disc, nu, section.home)
        out = calc.ad_action(nu, section)
    if mu is not None:
        v = _to_home(disc, section, "vertex")
        ds = disc.partial(v.kind).apply(v)
        mu_c = _to_home(disc, mu, "cell")
        piece = calc.mul_beltrami(mu_c, ds)
        piece = piece * (1.0 if plus else -1.0)
        if out is None:
            out = piece
        else:
            out = _to_home(disc, out, "cell") + piece
    return out


def _lstar_operator(ctx, omega, step):
    """-star ad(nu) star - d* mu-bar (the adjoint first-variation on forms)."""
    disc = ctx.disc
    nu = ctx.slot(step["nu"])
    mu = ctx.slot(step["mu"])
    out = None
    if nu is not None:
        nu_h = _to_home(disc, nu, omega.home)
        out = calc.star_ad_star(nu_h, omega) * (-1.0)
    if mu is not None:
        mu_h = _to_home(disc, mu, omega.home)
        w = calc.mul_beltrami_conj(mu_h, omega)
        w = _to_home(disc, w, "cell")
        dom = FormKind("function", w.kind.bundle)
        piece = disc.partial(dom).adjoint().apply(w) * (-1.0)
        if out is None:
            out = piece
        else:
            out = _to_home(disc, out, "vertex") + piece
    return out


def pair_fields(disc, left, right):
    """Positive mass pairing of two like-kind fields.

    Matching homes are paired in place; mixed homes are brought to cells.
    """
    if left is None or right is None:
        return 0.0 + 0.0j
    if left.home == right.home:
        lc, rc = left, right
    else:
        lc = _to_home(disc, left, "cell")
        rc = _to_home(disc, right, "cell")
    if lc.kind.degree != rc.kind.degree:
        raise KindMismatch(f"cannot pair {lc.kind} with {rc.kind}")
    if lc.kind.bundle != rc.kind.bundle:
        lc = _cast_bundle(disc, lc, FormKind(lc.kind.degree, "EndE"))
        rc = _cast_bundle(disc, rc, FormKind(rc.kind.degree, "EndE"))
    return disc.ip(lc, rc)


# ---------------------------------------------------------------------------
# static typecheck
# ---------------------------------------------------------------------------

_START_KINDS = {
    "mu1": ("beltrami", "trivial"),
    "mu2": ("beltrami", "trivial"),
    "mu3": ("beltrami", "trivial"),
    "mu4": ("beltrami", "trivial"),
    "nu1": ("(0,1)", "EndE"),
    "nu2": ("(0,1)", "EndE"),
    "nu3": ("(0,1)", "EndE"),
    "nu4": ("(0,1)", "EndE"),
    "mu_pair": ("function", "trivial"),
}


def _typecheck_chain(chain, basis_kind=None):
    """Walk a pipeline with symbolic kinds; raises KindMismatch when illegal."""

    def weights(deg):
        return calc.DEGREES[deg]

    def deg_for(pq):
        for name, w in calc.DEGREES.items():
            if w == pq:
                return name
        raise KindMismatch(f"untyped weights {pq}")

    state = None
    for step in chain:
        if "start" in step:
            name = step["start"]
            state = basis_kind if name == "basis" else _START_KINDS[name]
            if state is None:
                raise KindMismatch("basis start without basis kind")
            continue
        op = step["op"]
        if op == "add_chain":
            other = _typecheck_chain(step["chain"], basis_kind)
            if state is None:
                state = other
            elif state != other:
                raise KindMismatch(f"add_chain mixes {state} and {other}")
            continue
        if state is None:
            raise KindMismatch("pipeline op before any start token")
        deg, bund = state
        p, q = weights(deg)
        if op in ("scale",):
            pass
        elif op == "dagger":
            state = (deg_for((q, p)), bund)
        elif op == "star":
            if deg == "2form":
                state = ("function", bund)
            elif deg == "function":
                state = ("2form", bund)
            elif deg not in ("(0,1)", "(1,0)"):
                raise KindMismatch(f"star undefined on {deg}")
        elif op == "dbar":
            if q != 0:
                raise KindMismatch(f"dbar needs (p,0) domain, got {deg}")
            state = (deg_for((p, 1)) if deg != "(1,0)" else "2form", bund)
            if deg == "(1,0)":
                state = ("2form", bund)
        elif op == "partial":
            if deg == "function":
                state = ("(1,0)", bund)
            elif deg == "(0,1)":
                state = ("2form", bund)
            else:
                raise KindMismatch(f"partial undefined on {deg}")
        elif op == "nabla":
            if deg != "vector":
                raise KindMismatch("nabla acts on vector fields")
            state = ("function", bund)
        elif op == "dbar_star":
            if deg != "(0,1)":
                raise KindMismatch(f"dbar_star needs (0,1), got {deg}")
            state = ("function", bund)
        elif op == "partial_star":
            if deg != "(1,0)":
                raise KindMismatch(f"partial_star needs (1,0), got {deg}")
            state = ("function", bund)
        elif op == "nabla_star":
            if deg != "function":
                raise KindMismatch("nabla_star needs functions")
            state = ("vector", bund)
        elif op == "green":
            want = {"EndE": ("function", "EndE"), "AdE": ("function", "AdE"),
                    "trivial": ("function", "trivial"), "vector": ("vector", "trivial")}[step["bundle"]]
            if deg != want[0]:
                raise KindMismatch(f"green[{step['bundle']}] got {deg}")
        elif op == "mul_mu":
            state = (deg_for((p - 1, q + 1)), bund)
        elif op == "mul_mu_conj":
            state = (deg_for((p + 1, q - 1)), bund)
        elif op in ("mul_pair", "mul_fn"):
            if op == "mul_fn":
                inner = _typecheck_chain(step["chain"], basis_kind)
                if inner[0] != "function":
                    raise KindMismatch("mul_fn needs a function subchain")
        elif op == "ad":
            # bracketing with a (0,1)-form slot adds its weights
            state = (deg_for((p, q + 1)), "EndE")
        elif op == "ad_by":
            inner = _typecheck_chain(step["chain"], basis_kind)
            if inner[0] != "function":
                raise KindMismatch("ad_by needs a section subchain")
            state = (deg, "EndE")
        elif op == "sas":
            if deg != "(0,1)":
                raise KindMismatch(f"sas needs (0,1), got {deg}")
            state = ("function", "EndE")
        elif op in ("L", "Lplus"):
            if deg != "function":
                raise KindMismatch(f"{op} acts on sections")
            state = ("(0,1)", bund)
        elif op == "Lstar":
            if deg != "(0,1)":
                raise KindMismatch("Lstar acts on (0,1)-forms")
            state = ("function", bund)
        elif op in ("project", "project_conj"):
            want = "(0,1)" if op == "project" else "(1,0)"
            if deg != want:
                raise KindMismatch(f"{op} needs {want}")
        else:
            raise KindMismatch(f"unknown token {op!r}")
    return state


def typecheck_formula(doc):
    """Static kind check of every pipeline in a formula document."""
    basis_kinds = {"TX": ("beltrami", "trivial"), "EndE": ("(0,1)", "EndE")}

    def check_term(term):
        if term["shape"] == "pairing":
            lk = _typecheck_chain(term["left"])
            rk = _typecheck_chain(term["right"])
            if lk[0] != rk[0] and {lk[0], rk[0]} != {"(0,1)"}:
                # daggered right legs arrive as the same degree
                if not (lk[0] == rk[0]):
                    raise KindMismatch(f"pairing mixes {lk} and {rk}")
        elif term["shape"] == "trace":
            _typecheck_chain(term["chain"], basis_kinds[term["basis"]])
        elif term["shape"] == "omega":
            pass
        else:
            raise KindMismatch(f"unknown term shape {term['shape']!r}")

    if "terms" in doc:
        for term in doc["terms"]:
            check_term(term)
    if "blocks" in doc:
        for block in doc["blocks"].values():
            for term in block:
                check_term(term)
    return True


# ---------------------------------------------------------------------------
# public evaluators
# ---------------------------------------------------------------------------


def base_metric(tv1, tv2, disc=None):
    """Base-point metric and the two Kaehler form values.

    g = <mu1, mu2>_WP + <nu1, nu2>; omega(u, v) = Re g(iu, v) = -Im g(u, v),
    evaluated per sector.
    """
    disc = disc or _disc_of(tv1, tv2)
    g_t = pair_fields(disc, tv1.mu, tv2.mu)
    g_m = pair_fields(disc, tv1.nu, tv2.nu)
    return g_t + g_m, -np.imag(g_t), -np.imag(g_m)


def _disc_of(*tvs):
    for tv in tvs:
        for f in (tv.mu, tv.nu):
            if f is not None:
                return f.disc
    raise KindMismatch("all tangent slots empty")


def _combined_slots(basis_tx, basis_nu, index):
    """Slot fields of combined-basis element `index` (TX block first)."""
    nt = basis_tx.dimension
    if index < nt:
        return basis_tx.vertex_elements[index], None
    return None, basis_nu.vertex_elements[index - nt]


def _conj_field(f):
    return None if f is None else f


def metric_hessian(basis_tx, basis_e, config=None):
    """All displayed second-derivative terms of the metric, index-resolved.

    Entries are H[i, j, k, l] with i, j the differentiation directions and
    k, l the metric arguments, over the combined TX + EndE basis.
    """
    config = config or TensorConfig()
    disc = basis_tx.disc
    doc = load_formula("metric_hessian")
    typecheck_formula(doc)
    n = basis_tx.dimension + basis_e.dimension
    bases = {"TX": basis_tx, "EndE": basis_e}

    terms = {t["label"]: np.zeros((n, n, n, n), dtype=complex) for t in doc["terms"]}
    for i in range(n):
        mu1, nu1 = _combined_slots(basis_tx, basis_e, i)
        for j in range(n):
            mu2, nu2 = _combined_slots(basis_tx, basis_e, j)
            ctx = ChainContext(disc, bases, config,
                               slots={"mu1": mu1, "nu1": nu1, "mu2": mu2, "nu2": nu2})
            for term in doc["terms"]:
                coeff = complex(*term["coeff"])
                lefts = {}
                rights = {}
                for k in range(n):
                    mu3, nu3 = _combined_slots(basis_tx, basis_e, k)
                    ctx.bind(mu3=mu3, nu3=nu3, mu4=None, nu4=None)
                    lefts[k] = eval_chain(ctx, term["left"], chain_id=(term["label"], "L"))
                for l in range(n):
                    mu4, nu4 = _combined_slots(basis_tx, basis_e, l)
                    ctx.bind(mu3=None, nu3=None, mu4=mu4, nu4=nu4)
                    rights[l] = eval_chain(ctx, term["right"], chain_id=(term["label"], "R"))
                for k in range(n):
                    if lefts[k] is None:
                        continue
                    for l in range(n):
                        if rights[l] is None:
                            continue
                        terms[term["label"]][i, j, k, l] = coeff * pair_fields(
                            disc, lefts[k], rights[l]
                        )
    entries = sum(terms.values())
    defect = hermitian_defect(entries)
    return TensorResult(
        label="metric_hessian",
        axes={"basis": ["TX"] * basis_tx.dimension + ["EndE"] * basis_e.dimension},
        entries=entries,
        terms=terms,
        meta={"hermitian_defect": defect, "config": config.to_json()},
    )


def hermitian_defect(h):
    """Relative Frobenius defect of H[i,j,k,l] vs conj(H[j,i,l,k])."""
    sym = np.conj(np.transpose(h, (1, 0, 3, 2)))
    denom = np.linalg.norm(h.ravel())
    if denom == 0:
        return 0.0
    return float(np.linalg.norm((h - sym).ravel()) / denom)


def audit_hessian_signs(result):
    """Search per-term sign flips minimizing the Hermitian-symmetry defect."""
    labels = list(result.terms)
    best = (hermitian_defect(result.entries), tuple([1] * len(labels)))
    stack = [np.asarray(result.terms[l]) for l in labels]
    for mask in range(2 ** len(labels)):
        signs = [1 - 2 * ((mask >> b) & 1) for b in range(len(labels))]
        h = sum(s * t for s, t in zip(signs, stack))
        d = hermitian_defect(h)
        if d < best[0] - 1e-15:
            best = (d, tuple(signs))
    table = {
        "default_defect": hermitian_defect(result.entries),
        "best_defect": best[0],
        "best_signs": dict(zip(labels, best[1])),
    }
    return table


def ricci_form(basis_tx, basis_e, config=None, slot_tx=None, slot_nu=None, route="cell"):
    """The Ricci form as a matrix over the (slot) bases.

    Internal projections always run over the full End E harmonic basis; the
    slot bases default to (basis_tx, basis_e) but the Ad E restriction may be
    passed for the potential identity.
    """
    config = config or TensorConfig()
    disc = basis_tx.disc
    doc = load_formula("ricci_form")
    typecheck_formula(doc)
    slot_tx = slot_tx or basis_tx
    slot_nu = slot_nu or basis_e
    bases = {"TX": basis_tx, "EndE": basis_e}
    n = slot_tx.dimension + slot_nu.dimension

    terms = {t["label"]: np.zeros((n, n), dtype=complex) for t in doc["terms"]}
    for i in range(n):
        mu1, nu1 = _combined_slots(slot_tx, slot_nu, i)
        for j in range(n):
            mu2, nu2 = _combined_slots(slot_tx, slot_nu, j)
            ctx = ChainContext(disc, bases, config,
                               slots={"mu1": mu1, "nu1": nu1, "mu2": mu2, "nu2": nu2})
            for term in doc["terms"]:
                terms[term["label"]][i, j] = _eval_trace_term(ctx, term, bases, route)
    entries = sum(terms.values())
    return TensorResult(
        label="ricci_form",
        axes={"basis": ["TX"] * slot_tx.dimension + ["nu"] * slot_nu.dimension},
        entries=entries,
        terms=terms,
        meta={"config": config.to_json(), "route": route},
    )


def _eval_trace_term(ctx, term, bases, route="cell"):
    """Projected trace sum_a <chain(e_a), e_a>.

    route selects which representation of the harmonic basis feeds the chain
    and the pairing: the cell-canonical elements or the smooth vertex
    representatives.  The two routes are equal in the continuum; their
    discrete difference is ordinary quadrature error.
    """
    coeff = complex(*term["coeff"])
    basis = bases[term["basis"]]
    total = 0.0 + 0.0j
    for e_cell, e_vert in zip(basis.elements, basis.vertex_elements):
        e_in = e_vert if route == "vertex" else e_cell
        e_out = e_vert if route == "vertex" else e_cell
        ctx.bind(basis=e_in)
        # per-element results depend on the bound basis slot: give each
        # element its own prefix-cache identity
        out = eval_chain(ctx, term["chain"], chain_id=(id(term["chain"]), id(e_in)))
        if out is None:
            continue
        total += pair_fields(ctx.disc, out, e_out)
    return coeff * total


_OMEGA_COEFFS = {
    "-2n/(2pi)": lambda n: -2.0 * n / TWO_PI,
    "-(n^2-1)/(6pi)": lambda n: -(n * n - 1.0) / (6.0 * np.pi),
    "1/(6pi)": lambda n: 1.0 / (6.0 * np.pi),
    "-n/(2pi)": lambda n: -n / TWO_PI,
    "-(n^2-1)/(12pi)": lambda n: -(n * n - 1.0) / (12.0 * np.pi),
    "-1/(12pi)": lambda n: -1.0 / (12.0 * np.pi),
}


def logdet_variations(basis_tx, basis_ade, config=None, basis_e=None):
    """Second-variation matrices of the two log-determinants.

    Returns a TensorResult over the combined TX + AdE basis whose entries
    encode d d-bar of (log det twisted + log det plain); the per-block
    breakdown (nn, mn, mm, d0) is retained.
    """
    config = config or TensorConfig()
    disc = basis_tx.disc
    doc = load_formula("logdet_variations")
    typecheck_formula(doc)
    if basis_e is None:
        basis_e = harm.harmonic_basis("EndE", disc.mesh, disc.rep)
    bases = {"TX": basis_tx, "EndE": basis_e}
    n_rank = disc.rep.n
    nt, na = basis_tx.dimension, basis_ade.dimension
    n = nt + na

    blocks = {}
    gram_t = np.eye(nt, dtype=complex)
    gram_m = np.eye(na, dtype=complex)

    def block_matrix(block_name, rows, cols, slot_fill):
        out = np.zeros((len(rows), len(cols)), dtype=complex)
        breakdown = {}
        for term in doc["blocks"][block_name]:
            mat = np.zeros_like(out)
            if term["shape"] == "omega":
                cf = _OMEGA_COEFFS[term["coeff_formula"]](n_rank)
                gram = gram_t if term["sector"] == "T" else gram_m
                mat = cf * gram
            else:
                for a, ia in enumerate(rows):
                    for b, ib in enumerate(cols):
                        slots = slot_fill(ia, ib)
                        ctx = ChainContext(disc, bases, config, slots=slots)
                        mat[a, b] = _eval_trace_term(ctx, term, bases, route="vertex")
            breakdown[term["label"]] = mat
            out = out + mat
        return out, breakdown

    tx_el = basis_tx.vertex_elements
    ade_el = basis_ade.vertex_elements

    nn, bk_nn = block_matrix(
        "nn", range(na), range(na),
        lambda i, j: {"nu1": ade_el[i], "nu2": ade_el[j], "mu1": None, "mu2": None},
    )
    mn, bk_mn = block_matrix(
        "mn", range(nt), range(na),
        lambda i, j: {"mu1": tx_el[i], "nu2": ade_el[j], "nu1": None, "mu2": None},
    )
    mm, bk_mm = block_matrix(
        "mm", range(nt), range(nt),
        lambda i, j: {"mu1": tx_el[i], "mu2": tx_el[j], "nu1": None, "nu2": None},
    )
    d0, bk_d0 = block_matrix(
        "d0", range(nt), range(nt),
        lambda i, j: {"mu1": tx_el[i], "mu2": tx_el[j], "nu1": None, "nu2": None},
    )

    entries = np.zeros((n, n), dtype=complex)
    entries[nt:, nt:] = nn
    entries[:nt, nt:] = mn
    entries[nt:, :nt] = mn.conj().T  # Hermitian partner of the mixed block
    entries[:nt, :nt] = mm + d0

    terms = {}
    for bk, prefix in ((bk_nn, "nn"), (bk_mn, "mn"), (bk_mm, "mm"), (bk_d0, "d0")):
        for k, v in bk.items():
            terms[f"{prefix}:{k}"] = v
    return TensorResult(
        label="logdet_variations",
        axes={"basis": ["TX"] * nt + ["AdE"] * na},
        entries=entries,
        terms=terms,
        meta={
            "config": config.to_json(),
            "blocks": {"nn": "AdE x AdE", "mn": "TX x AdE", "mm": "TX x TX", "d0": "TX x TX"},
            "omega_coefficients": {
                "nn": _OMEGA_COEFFS["-2n/(2pi)"](n_rank),
                "mm": _OMEGA_COEFFS["-(n^2-1)/(6pi)"](n_rank),
                "d0": _OMEGA_COEFFS["1/(6pi)"](n_rank),
            },
        },
    )


def kahler_first_derivative_residual(direction, tv1, tv2):
    """The two surviving first-derivative integrals of the metric, summed.

    Exact cancellation in the continuum; the two terms are evaluated through
    different quadratures (vertex mass vs cell wedge) so the residual is an
    honest discretization witness.  Vanishes identically when the direction
    has no nu part or tv2 has no mu part.
    """
    disc = _disc_of(direction, tv1, tv2)
    nu_dir = direction.nu
    nu1 = tv1.nu
    mu2 = tv2.mu
    if nu_dir is None or mu2 is None or nu1 is None:
        return 0.0
    nu1_v = _to_home(disc, nu1, "vertex")
    nu_v = _to_home(disc, nu_dir, "vertex")
    mu2_v = _to_home(disc, mu2, "vertex")
    corr = calc.beltrami_from_nu_pair(nu1_v, nu_v)
    term1 = -disc.ip(corr, mu2_v)
    target = calc.mul_beltrami(mu2_v, calc.dagger(nu_v))
    term2 = calc.wedge_integrate(nu1_v, target)
    return abs(term1 + term2)


@dataclass
class ResidualReport:
    lhs: np.ndarray
    rhs: np.ndarray
    residual: np.ndarray
    relative_frobenius: float
    coefficients: dict
    breakdown: dict

    def to_json(self):
        return {
            "relative_frobenius": self.relative_frobenius,
            "coefficients": self.coefficients,
            "residual_max": float(np.abs(self.residual).max()),
            "lhs_norm": float(np.linalg.norm(self.lhs)),
            "rhs_norm": float(np.linalg.norm(self.rhs)),
            "breakdown": {k: float(v) for k, v in self.breakdown.items()},
        }


def ricci_potential_identity(basis_tx, basis_ade, n, config=None):
    """Matrix residual of the Ricci-potential identity over TX + AdE slots.

    LHS: twice the second-variation matrix of the potential (the sum of the
    two log-determinant Hessians); RHS: the Ricci matrix minus the two
    symplectic terms with their literal constants n/2pi and n^2/12pi.
    """
    config = config or TensorConfig()
    disc = basis_tx.disc
    basis_e = harm.harmonic_basis("EndE", disc.mesh, disc.rep)

    var = logdet_variations(basis_tx, basis_ade, config, basis_e=basis_e)
    lhs = var.entries  # encodes 2 i d dbar F = (dd log det A) + (dd log det 0)

    ric = ricci_form(basis_tx, basis_e, config, slot_tx=basis_tx, slot_nu=basis_ade)
    nt, na = basis_tx.dimension, basis_ade.dimension
    omega_t = np.zeros_like(ric.entries)
    omega_t[:nt, :nt] = np.eye(nt)
    omega_m = np.zeros_like(ric.entries)
    omega_m[nt:, nt:] = np.eye(na)
    c_m = n / TWO_PI
    c_t = n * n / (12.0 * np.pi)
    rhs = ric.entries - c_m * omega_m - c_t * omega_t

    res = lhs - rhs
    rel = float(np.linalg.norm(res) / max(np.linalg.norm(rhs), 1e-300))
    breakdown = {
        "lhs_nn_norm": np.linalg.norm(lhs[nt:, nt:]),
        "lhs_mm_norm": np.linalg.norm(lhs[:nt, :nt]),
        "rhs_nn_norm": np.linalg.norm(rhs[nt:, nt:]),
        "rhs_mm_norm": np.linalg.norm(rhs[:nt, :nt]),
        "res_nn": np.linalg.norm(res[nt:, nt:]),
        "res_mn": np.linalg.norm(res[:nt, nt:]),
        "res_mm": np.linalg.norm(res[:nt, :nt]),
    }
    return ResidualReport(
        lhs=lhs,
        rhs=rhs,
        residual=res,
        relative_frobenius=rel,
        coefficients={"omega_M": c_m, "omega_T": c_t,
                      "omega_M_formula": "n/(2 pi)", "omega_T_formula": "n^2/(12 pi)"},
        breakdown=breakdown,
    )
