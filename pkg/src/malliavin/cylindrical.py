"""Cylindrical random variables F = sum_j f_j(W(h_1),...,W(h_n)) tensor x_j.

This is the user-facing layer: node functions are differentiable expression
trees, directions are arbitrary step functions (orthonormalized internally
when needed), and conditional expectations are computed by exact Gaussian
splitting of every direction at the conditioning time followed by tensor
Gauss-Hermite quadrature over the future variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .banach import BanachSpaceSpec, GammaOperator
from .chaos import ChaosExpansion, MultiIndex
from .quadrature import tensor_gauss_hermite
from .rng import substream
from .smoothfn import (
    NotPolynomialError,
    SmoothFunction,
    mul,
    soft_clip,
    tree_from_json,
    tree_to_json,
    variable,
)
from .timegrid import (
    BrownianPath,
    PathBatch,
    StepFunction,
    evaluate_W,
    gram_schmidt,
    inner_product,
    restrict_after,
    restrict_before,
    step_from_json,
    step_to_json,
)

EIGENVALUE_FLOOR = 1e-14
MAX_FUTURE_DIM = 4
DEFAULT_QUAD_ORDER = 10
MC_FALLBACK_SAMPLES = 10_000


@dataclass(frozen=True)
class CylindricalTerm:
    f: SmoothFunction
    directions: tuple[StepFunction, ...]
    coefficient: np.ndarray  # (m,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "directions", tuple(self.directions))
        c = np.asarray(self.coefficient, dtype=float)
        object.__setattr__(self, "coefficient", c)
        if self.f.arity > len(self.directions):
            raise ValueError(
                f"node function uses variable v{self.f.max_var} but only "
                f"{len(self.directions)} directions were given"
            )


@dataclass(frozen=True)
class CylindricalRV:
    terms: tuple[CylindricalTerm, ...]
    codomain: BanachSpaceSpec

    def __post_init__(self) -> None:
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if t.coefficient.shape != (self.codomain.m,):
                raise ValueError("term coefficient dimension mismatch")

    @property
    def bounded(self) -> bool:
        return all(t.f.bounded for t in self.terms)

    def directions(self) -> list[StepFunction]:
        out: list[StepFunction] = []
        for t in self.terms:
            out.extend(t.directions)
        return out


@dataclass(frozen=True)
class DerivativeTerm:
    f: SmoothFunction  # the undifferentiated node function
    directions: tuple[StepFunction, ...]
    partial: int  # which variable is differentiated
    coefficient: np.ndarray  # (m,)


@dataclass(frozen=True)
class DerivativeRV:
    """The operator-valued derivative: sum of d_j f tensor (h_j tensor x)."""

    terms: tuple[DerivativeTerm, ...]
    codomain: BanachSpaceSpec

    def apply(self, h: StepFunction, path: BrownianPath | PathBatch):
        """Pathwise value of DF(h); shape (m,) or (B, m)."""
        batch = isinstance(path, PathBatch)
        out = np.zeros((path.n_paths, self.codomain.m) if batch else (self.codomain.m,))
        for t in self.terms:
            weight = inner_product(t.directions[t.partial], h)
            if weight == 0.0:
                continue
            w = [evaluate_W(path, d) for d in t.directions]
            eye = np.eye(len(t.directions))
            _, d1, _ = t.f.jet(w, eye[t.partial])
            if batch:
                out += np.multiply.outer(
                    np.broadcast_to(d1, (path.n_paths,)), weight * t.coefficient
                )
            else:
                out += float(d1) * weight * t.coefficient
        return out

    def operator_at(self, path: BrownianPath) -> GammaOperator:
        """The realized finite-rank operator DF(omega)."""
        hs = [t.directions[t.partial] for t in self.terms]
        basis, coords = gram_schmidt(hs)
        mat = np.zeros((self.codomain.m, len(basis)))
        for row, t in zip(coords, self.terms):
            w = [evaluate_W(path, d) for d in t.directions]
            eye = np.eye(len(t.directions))
            _, d1, _ = t.f.jet(w, eye[t.partial])
            mat += np.outer(t.coefficient, float(d1) * row)
        return GammaOperator(tuple(basis), mat, self.codomain)


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def single_term(
    f: SmoothFunction,
    directions: Sequence[StepFunction],
    coefficient: Sequence[float] | np.ndarray = (1.0,),
    p: float = 2.0,
) -> CylindricalRV:
    c = np.atleast_1d(np.asarray(coefficient, dtype=float))
    space = BanachSpaceSpec(c.shape[0], p)
    return CylindricalRV((CylindricalTerm(f, tuple(directions), c),), space)


def w_of(h: StepFunction, coefficient=(1.0,), p: float = 2.0) -> CylindricalRV:
    """F = W(h) tensor x."""
    return single_term(variable(0), (h,), coefficient, p)


def cyl_add(F: CylindricalRV, G: CylindricalRV) -> CylindricalRV:
    if F.codomain.m != G.codomain.m:
        raise ValueError("codomain mismatch")
    return CylindricalRV(F.terms + G.terms, F.codomain)


def cyl_scale(F: CylindricalRV, c: float) -> CylindricalRV:
    terms = tuple(
        CylindricalTerm(t.f, t.directions, c * t.coefficient) for t in F.terms
    )
    return CylindricalRV(terms, F.codomain)


def cyl_mul_scalar(F: CylindricalRV, G: CylindricalRV) -> CylindricalRV:
    """Product of a scalar rv with an arbitrary one (term-by-term trees)."""
    if F.codomain.m != 1:
        F, G = G, F
    if F.codomain.m != 1:
        raise ValueError("one factor must be scalar")
    terms = []
    for tf in F.terms:
        for tg in G.terms:
            tree = mul(tf.f, tg.f.shift_vars(len(tf.directions)))
            terms.append(
                CylindricalTerm(
                    tree,
                    tf.directions + tg.directions,
                    tf.coefficient[0] * tg.coefficient,
                )
            )
    return CylindricalRV(tuple(terms), G.codomain)


def cyl_pair(F: CylindricalRV, G: CylindricalRV) -> CylindricalRV:
    """The scalar pairing <F, G> as a cylindrical rv."""
    if F.codomain.m != G.codomain.m:
        raise ValueError("pairing requires equal dimensions")
    terms = []
    for tf in F.terms:
        for tg in G.terms:
            tree = mul(tf.f, tg.f.shift_vars(len(tf.directions)))
            pairing = float(np.dot(tf.coefficient, tg.coefficient))
            terms.append(
                CylindricalTerm(
                    tree, tf.directions + tg.directions, np.array([pairing])
                )
            )
    return CylindricalRV(tuple(terms), BanachSpaceSpec(1, 2.0))


def truncate_rv(F: CylindricalRV, level: float, width: float = 1.0) -> CylindricalRV:
    """Clamp every node function at +-level with the C^2 soft clip."""
    terms = tuple(
        CylindricalTerm(soft_clip(t.f, level, width), t.directions, t.coefficient)
        for t in F.terms
    )
    return CylindricalRV(terms, F.codomain)


# ---------------------------------------------------------------------------
# evaluation and derivative
# ---------------------------------------------------------------------------


def evaluate(F: CylindricalRV, path: BrownianPath | PathBatch) -> np.ndarray:
    """Pathwise value; shape (m,) or (B, m)."""
    batch = isinstance(path, PathBatch)
    out = np.zeros((path.n_paths, F.codomain.m) if batch else (F.codomain.m,))
    for t in F.terms:
        w = [evaluate_W(path, d) for d in t.directions]
        v = t.f.value(w)
        if batch:
            out += np.multiply.outer(np.broadcast_to(v, (path.n_paths,)), t.coefficient)
        else:
            out += float(v) * t.coefficient
    return out


def malliavin_derivative(F: CylindricalRV) -> DerivativeRV:
    """Symbolic derivative: one rank-one term per (term, direction) pair."""
    out = []
    for t in F.terms:
        for j in range(len(t.directions)):
            out.append(DerivativeTerm(t.f, t.directions, j, t.coefficient))
    return DerivativeRV(tuple(out), F.codomain)


# ---------------------------------------------------------------------------
# conditional expectation by Gaussian splitting
# ---------------------------------------------------------------------------


def _future_factor(futures: Sequence[StepFunction]) -> np.ndarray:
    """Factor L with L L^T = future Gram matrix, reduced to numerical rank."""
    n = len(futures)
    gram = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            gram[i, j] = gram[j, i] = inner_product(futures[i], futures[j])
    vals, vecs = np.linalg.eigh(gram)
    keep = vals > EIGENVALUE_FLOOR
    return vecs[:, keep] * np.sqrt(vals[keep])


def _term_conditional(
    term: CylindricalTerm,
    t: float,
    path: BrownianPath | PathBatch,
    quad_order: int,
    max_future_dim: int,
    mc_fallback: bool,
    mc_samples: int,
    seed: int,
    eval_fn: Callable | None = None,
):
    """E[g(W(h_1),...,W(h_n)) | F_t] pathwise, where g defaults to term.f.

    ``eval_fn(w_list)`` may override the integrand evaluation (used for
    conditional means of partial derivatives); it must be vectorized.
    """
    pasts = [restrict_before(h, t) for h in term.directions]
    futures = [restrict_after(h, t) for h in term.directions]
    a = [np.asarray(evaluate_W(path, p)) for p in pasts]
    L = _future_factor(futures) if futures else np.zeros((0, 0))
    r = L.shape[1] if L.size else 0
    fn = eval_fn if eval_fn is not None else (lambda w: term.f.value(w))
    if r == 0:
        return fn([x for x in a])
    if r <= max_future_dim:
        pts, wts = tensor_gauss_hermite(r, quad_order)
    elif mc_fallback:
        rng = substream(seed)
        pts = rng.standard_normal((mc_samples, r))
        wts = np.full(mc_samples, 1.0 / mc_samples)
    else:
        raise ValueError(
            f"{r} future directions exceed the tensor-quadrature cap "
            f"{max_future_dim}; enable mc_fallback"
        )
    shift = pts @ L.T  # (Q, n)
    w = [a[k][..., None] + shift[:, k] for k in range(len(term.directions))]
    vals = fn(w)  # (..., Q)
    return np.asarray(vals) @ wts


def conditional_expectation(
    F: CylindricalRV,
    t: float,
    path: BrownianPath | PathBatch,
    quad_order: int = DEFAULT_QUAD_ORDER,
    max_future_dim: int = MAX_FUTURE_DIM,
    mc_fallback: bool = False,
    mc_samples: int = MC_FALLBACK_SAMPLES,
    seed: int = 0,
) -> np.ndarray:
    """E(F | F_t) evaluated on the given path(s); shape (m,) or (B, m).

    Every direction is split at t; the known past contributes W of the
    restricted direction, the future contributes a Gaussian vector whose
    covariance is the future Gram matrix (factored with an eigenvalue floor).
    Exact for polynomial nodes of degree < 2 * quad_order.
    """
    if quad_order < 1:
        raise ValueError("quad_order must be >= 1")
    if t < 0 or t > path.grid.horizon + 1e-12:
        raise ValueError(f"conditioning time {t} outside [0, T]")
    batch = isinstance(path, PathBatch)
    out = np.zeros((path.n_paths, F.codomain.m) if batch else (F.codomain.m,))
    for term in F.terms:
        val = _term_conditional(
            term, t, path, quad_order, max_future_dim, mc_fallback, mc_samples, seed
        )
        if batch:
            out += np.multiply.outer(
                np.broadcast_to(val, (path.n_paths,)), term.coefficient
            )
        else:
            out += float(val) * term.coefficient
    return out


def conditional_partial_means(
    term: CylindricalTerm,
    t: float,
    path: BrownianPath | PathBatch,
    quad_order: int = DEFAULT_QUAD_ORDER,
    max_future_dim: int = MAX_FUTURE_DIM,
    mc_fallback: bool = False,
    mc_samples: int = MC_FALLBACK_SAMPLES,
    seed: int = 0,
) -> list[np.ndarray]:
    """E[d_j f (W(h_1),...,W(h_n)) | F_t] for every j, via jet evaluation."""
    n = len(term.directions)
    eye = np.eye(max(n, 1))
    out = []
    for j in range(n):
        out.append(
            _term_conditional(
                term,
                t,
                path,
                quad_order,
                max_future_dim,
                mc_fallback,
                mc_samples,
                seed,
                eval_fn=lambda w, _j=j: term.f.jet(w, eye[_j])[1],
            )
        )
    return out


def mean(F: CylindricalRV, quad_order: int = 20, **kw) -> np.ndarray:
    """E(F) by full-future quadrature (conditioning at t = 0)."""
    trivial = BrownianPath(
        _two_point_grid(F), np.zeros((1, _rv_dim(F))), seed=0
    )
    return conditional_expectation(F, 0.0, trivial, quad_order, **kw)


def _rv_dim(F: CylindricalRV) -> int:
    dirs = F.directions()
    return dirs[0].d if dirs else 1


def _two_point_grid(F: CylindricalRV):
    from .timegrid import TimeGrid

    dirs = F.directions()
    T = dirs[0].horizon if dirs else 1.0
    return TimeGrid((0.0, T))


# ---------------------------------------------------------------------------
# exact chaos bridge
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _monomial_to_hermite(n: int) -> tuple[tuple[int, float], ...]:
    """x^n = sum_j n! / (2^j j! (n-2j)!) He_{n-2j}."""
    out = []
    for j in range(n // 2 + 1):
        c = math.factorial(n) / (2**j * math.factorial(j) * math.factorial(n - 2 * j))
        out.append((n - 2 * j, float(c)))
    return tuple(out)


def to_chaos(F: CylindricalRV, basis: Sequence[StepFunction] | None = None) -> ChaosExpansion:
    """Exact chaos expansion of a polynomial cylindrical rv.

    Directions are orthonormalized internally (or expanded over a supplied
    orthonormal ``basis``, which must span them).
    """
    all_dirs = F.directions()
    if basis is None:
        basis_list, coords = gram_schmidt(all_dirs)
    else:
        basis_list = list(basis)
        coords = np.array(
            [[inner_product(h, b) for b in basis_list] for h in all_dirs]
        )
        for h, row in zip(all_dirs, coords):
            residual = inner_product(h, h) - float(row @ row)
            if abs(residual) > 1e-8 * max(1.0, inner_product(h, h)):
                raise ValueError("supplied basis does not span the directions")
    coeffs: dict[MultiIndex, np.ndarray] = {}
    offset = 0
    for term in F.terms:
        n = len(term.directions)
        rows = coords[offset : offset + n]
        offset += n
        poly = term.f.to_poly(max(n, 1))
        # substitute v_j = sum_k rows[j, k] xi_k, expanding in the xi variables
        K = len(basis_list)
        for expo, cval in poly.items():
            expanded: dict[tuple[int, ...], float] = {(0,) * K: cval}
            for j, e in enumerate(expo):
                lin = {
                    tuple(int(k == kk) for kk in range(K)): rows[j, k]
                    for k in range(K)
                    if rows[j, k] != 0.0
                }
                for _ in range(e):
                    expanded = _poly_mul_sparse(expanded, lin)
            for xi_expo, v in expanded.items():
                _accumulate_hermite(coeffs, xi_expo, v * term.coefficient)
    coeffs = {a: c for a, c in coeffs.items() if np.any(c != 0.0)}
    return ChaosExpansion(tuple(basis_list), coeffs, F.codomain)


def _poly_mul_sparse(p: dict, q: dict) -> dict:
    out: dict[tuple[int, ...], float] = {}
    for ea, va in p.items():
        for eb, vb in q.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, 0.0) + va * vb
    return out


def _accumulate_hermite(
    coeffs: dict[MultiIndex, np.ndarray], xi_expo: tuple[int, ...], vec: np.ndarray
) -> None:
    """Add vec * prod_k xi_k^{e_k}, re-expanded in the Hermite basis."""
    terms: list[tuple[dict[int, int], float]] = [({}, 1.0)]
    for k, e in enumerate(xi_expo):
        if e == 0:
            continue
        lin = _monomial_to_hermite(e)
        terms = [
            ({**t, k: deg} if deg else t, c0 * c)
            for t, c0 in terms
            for deg, c in lin
        ]
    for t, c in terms:
        a = MultiIndex.from_dict(t)
        cur = coeffs.get(a)
        coeffs[a] = c * vec if cur is None else cur + c * vec


# ---------------------------------------------------------------------------
# JSON specification format
# ---------------------------------------------------------------------------


def rv_to_json(F: CylindricalRV) -> dict:
    return {
        "codomain": {"m": F.codomain.m, "p": F.codomain.p},
        "terms": [
            {
                "f": tree_to_json(t.f),
                "directions": [step_to_json(h) for h in t.directions],
                "coefficient": t.coefficient.tolist(),
            }
            for t in F.terms
        ],
    }


def rv_from_json(obj: dict) -> CylindricalRV:
    space = BanachSpaceSpec(obj["codomain"]["m"], obj["codomain"].get("p", 2.0))
    terms = []
    for t in obj["terms"]:
        terms.append(
            CylindricalTerm(
                tree_from_json(t["f"]),
                tuple(step_from_json(h) for h in t["directions"]),
                np.asarray(t["coefficient"], dtype=float),
            )
        )
    return CylindricalRV(tuple(terms), space)
