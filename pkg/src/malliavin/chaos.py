"""Exact symbolic Wiener-chaos algebra over a finite orthonormal family.

Random variables are finite sums  sum_alpha c_alpha * He_alpha(xi)  where
xi_j = W(psi_j) for a registered orthonormal family (psi_j), He_alpha is a
product of probabilists' Hermite polynomials (He_0 = 1, He_1 = x,
He_{n+1} = x He_n - n He_{n-1}) and the coefficients c_alpha live in R^m.
With this normalization E He_n(xi)^2 = n!, so second moments carry explicit
factorial weights and every identity below is exact up to float rounding.

Operator-valued variables (HChaos) store an (m x M) matrix per multi-index:
column j is the image of psi_j under the operator coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .banach import BanachSpaceSpec
from .timegrid import (
    BrownianPath,
    PathBatch,
    StepFunction,
    evaluate_W,
    inner_product,
    step_equal,
)

DEGREE_CAP = 32


class DegreeCapError(ValueError):
    """Raised when a chaos product would exceed the configured degree cap."""


@dataclass(frozen=True)
class MultiIndex:
    """Finitely supported map direction -> Hermite degree (degrees >= 1)."""

    entries: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        ent = tuple(sorted((int(j), int(d)) for j, d in self.entries if d != 0))
        if any(d < 0 for _, d in ent):
            raise ValueError("degrees must be non-negative")
        if len({j for j, _ in ent}) != len(ent):
            raise ValueError("duplicate direction in multi-index")
        object.__setattr__(self, "entries", ent)

    @staticmethod
    def from_dict(d: Mapping[int, int]) -> "MultiIndex":
        return MultiIndex(tuple(d.items()))

    @property
    def degree(self) -> int:
        return sum(d for _, d in self.entries)

    @property
    def directions(self) -> tuple[int, ...]:
        return tuple(j for j, _ in self.entries)

    def get(self, j: int) -> int:
        for jj, d in self.entries:
            if jj == j:
                return d
        return 0

    def factorial(self) -> float:
        out = 1.0
        for _, d in self.entries:
            out *= math.factorial(d)
        return out

    def bump(self, j: int, by: int = 1) -> "MultiIndex":
        d = dict(self.entries)
        d[j] = d.get(j, 0) + by
        if d[j] < 0:
            raise ValueError("degree would become negative")
        return MultiIndex.from_dict(d)

    def lower(self, j: int) -> "MultiIndex":
        return self.bump(j, -1)

    def remap(self, mapping: Sequence[int]) -> "MultiIndex":
        return MultiIndex(tuple((mapping[j], d) for j, d in self.entries))


EMPTY = MultiIndex()


def _clean(coeffs: dict[MultiIndex, np.ndarray]) -> dict[MultiIndex, np.ndarray]:
    return {a: c for a, c in coeffs.items() if np.any(c != 0.0)}


@dataclass(frozen=True)
class ChaosExpansion:
    """Finite chaos expansion with coefficients in R^m."""

    basis: tuple[StepFunction, ...]
    coeffs: dict[MultiIndex, np.ndarray]
    codomain: BanachSpaceSpec

    def __post_init__(self) -> None:
        cleaned = {}
        for a, c in self.coeffs.items():
            c = np.asarray(c, dtype=float)
            if c.shape != (self.codomain.m,):
                raise ValueError(f"coefficient shape {c.shape} != ({self.codomain.m},)")
            if a.entries and max(j for j, _ in a.entries) >= len(self.basis):
                raise ValueError("multi-index direction outside basis family")
            if np.any(c != 0.0):
                cleaned[a] = c
        object.__setattr__(self, "coeffs", cleaned)
        object.__setattr__(self, "basis", tuple(self.basis))

    @property
    def max_degree(self) -> int:
        return max((a.degree for a in self.coeffs), default=0)

    def coefficient(self, a: MultiIndex) -> np.ndarray:
        return self.coeffs.get(a, np.zeros(self.codomain.m))


@dataclass(frozen=True)
class HChaos:
    """Chaos expansion with operator coefficients (m x M matrices).

    All coefficient operators share the expansion's basis family as their
    domain basis.
    """

    basis: tuple[StepFunction, ...]
    coeffs: dict[MultiIndex, np.ndarray]
    codomain: BanachSpaceSpec

    def __post_init__(self) -> None:
        m, M = self.codomain.m, len(self.basis)
        cleaned = {}
        for a, c in self.coeffs.items():
            c = np.asarray(c, dtype=float)
            if c.shape != (m, M):
                raise ValueError(f"operator coefficient shape {c.shape} != ({m},{M})")
            if np.any(c != 0.0):
                cleaned[a] = c
        object.__setattr__(self, "coeffs", cleaned)
        object.__setattr__(self, "basis", tuple(self.basis))

    def coefficient(self, a: MultiIndex) -> np.ndarray:
        return self.coeffs.get(a, np.zeros((self.codomain.m, len(self.basis))))


# ---------------------------------------------------------------------------
# constructors and linear structure
# ---------------------------------------------------------------------------


def constant_chaos(
    basis: Sequence[StepFunction], x: np.ndarray, codomain: BanachSpaceSpec
) -> ChaosExpansion:
    return ChaosExpansion(tuple(basis), {EMPTY: np.asarray(x, dtype=float)}, codomain)


def first_chaos(
    basis: Sequence[StepFunction],
    coords: Sequence[float],
    x: np.ndarray,
    codomain: BanachSpaceSpec,
) -> ChaosExpansion:
    """W(sum_j coords[j] psi_j) tensor x."""
    x = np.asarray(x, dtype=float)
    coeffs = {
        MultiIndex(((j, 1),)): c * x for j, c in enumerate(coords) if c != 0.0
    }
    return ChaosExpansion(tuple(basis), coeffs, codomain)


def hermite_chaos(
    basis: Sequence[StepFunction],
    degrees: Mapping[int, int],
    x: np.ndarray,
    codomain: BanachSpaceSpec,
) -> ChaosExpansion:
    """He_alpha(xi) tensor x for the multi-index given by ``degrees``."""
    return ChaosExpansion(
        tuple(basis), {MultiIndex.from_dict(degrees): np.asarray(x, float)}, codomain
    )


def chaos_add(F: ChaosExpansion, G: ChaosExpansion) -> ChaosExpansion:
    F, G = merge_bases(F, G)
    out = dict(F.coeffs)
    for a, c in G.coeffs.items():
        out[a] = out.get(a, 0.0) + c
    return ChaosExpansion(F.basis, _clean(out), F.codomain)


def chaos_scale(F: ChaosExpansion, c: float) -> ChaosExpansion:
    return ChaosExpansion(F.basis, {a: c * v for a, v in F.coeffs.items()}, F.codomain)


def hchaos_add(X: HChaos, Y: HChaos) -> HChaos:
    _require_same_basis(X.basis, Y.basis)
    out = dict(X.coeffs)
    for a, c in Y.coeffs.items():
        out[a] = out.get(a, 0.0) + c
    return HChaos(X.basis, _clean(out), X.codomain)


def hchaos_scale(X: HChaos, c: float) -> HChaos:
    return HChaos(X.basis, {a: c * v for a, v in X.coeffs.items()}, X.codomain)


def hchaos_columns(X: HChaos) -> list[ChaosExpansion]:
    """Decompose X into one E-valued expansion per basis direction."""
    cols = []
    for j in range(len(X.basis)):
        coeffs = {a: c[:, j] for a, c in X.coeffs.items()}
        cols.append(ChaosExpansion(X.basis, _clean(coeffs), X.codomain))
    return cols


def hchaos_from_columns(
    basis: Sequence[StepFunction], cols: Sequence[ChaosExpansion]
) -> HChaos:
    if len(cols) != len(basis):
        raise ValueError("one column expansion per basis direction required")
    codomain = cols[0].codomain
    m, M = codomain.m, len(basis)
    out: dict[MultiIndex, np.ndarray] = {}
    for j, col in enumerate(cols):
        for a, c in col.coeffs.items():
            out.setdefault(a, np.zeros((m, M)))[:, j] += c
    return HChaos(tuple(basis), out, codomain)


def _require_same_basis(a: tuple[StepFunction, ...], b: tuple[StepFunction, ...]):
    if a is b or (len(a) == len(b) and all(x is y for x, y in zip(a, b))):
        return
    if len(a) != len(b) or not all(step_equal(x, y) for x, y in zip(a, b)):
        raise ValueError("expansions use different basis families; merge first")


def merge_bases(
    F: ChaosExpansion, G: ChaosExpansion
) -> tuple[ChaosExpansion, ChaosExpansion]:
    """Re-express both expansions over the union of their basis families."""
    if F.basis is G.basis or (
        len(F.basis) == len(G.basis)
        and all(x is y for x, y in zip(F.basis, G.basis))
    ):
        return F, G
    combined = list(F.basis)
    mapping = []
    for g in G.basis:
        for k, f in enumerate(combined):
            if step_equal(f, g):
                mapping.append(k)
                break
        else:
            for f in combined:
                if abs(inner_product(f, g)) > 1e-8:
                    raise ValueError(
                        "cannot merge basis families: new direction is neither "
                        "equal nor orthogonal to the existing family"
                    )
            combined.append(g)
            mapping.append(len(combined) - 1)
    basis = tuple(combined)
    f2 = ChaosExpansion(basis, dict(F.coeffs), F.codomain)
    g2 = ChaosExpansion(
        basis, {a.remap(mapping): c for a, c in G.coeffs.items()}, G.codomain
    )
    return f2, g2


# ---------------------------------------------------------------------------
# product structure
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4096)
def hermite_linearization(a: int, b: int) -> tuple[tuple[int, float], ...]:
    """He_a * He_b = sum_k C(a,k) C(b,k) k! He_{a+b-2k}."""
    out = []
    for k in range(min(a, b) + 1):
        c = math.comb(a, k) * math.comb(b, k) * math.factorial(k)
        out.append((a + b - 2 * k, float(c)))
    return tuple(out)


def multiindex_product(
    alpha: MultiIndex, beta: MultiIndex
) -> list[tuple[MultiIndex, float]]:
    """Expand He_alpha * He_beta in the Hermite basis (exact)."""
    dirs = sorted(set(alpha.directions) | set(beta.directions))
    terms: list[tuple[dict[int, int], float]] = [({}, 1.0)]
    for j in dirs:
        lin = hermite_linearization(alpha.get(j), beta.get(j))
        terms = [
            ({**e, j: deg} if deg else e, c0 * c)
            for e, c0 in terms
            for deg, c in lin
        ]
    return [(MultiIndex.from_dict(e), c) for e, c in terms]


def chaos_multiply(
    F: ChaosExpansion, G: ChaosExpansion, cap: int = DEGREE_CAP
) -> ChaosExpansion:
    """Exact product of a scalar expansion with an arbitrary one."""
    if F.codomain.m != 1 and G.codomain.m == 1:
        F, G = G, F
    if F.codomain.m != 1:
        raise ValueError("one factor must be scalar (m = 1)")
    F, G = merge_bases(F, G)
    if F.max_degree + G.max_degree > cap:
        raise DegreeCapError(
            f"product degree {F.max_degree + G.max_degree} exceeds cap {cap}"
        )
    out: dict[MultiIndex, np.ndarray] = {}
    for a, fa in F.coeffs.items():
        for b, gb in G.coeffs.items():
            coeff = fa[0] * gb
            for gidx, c in multiindex_product(a, b):
                cur = out.get(gidx)
                out[gidx] = coeff * c if cur is None else cur + coeff * c
    return ChaosExpansion(F.basis, _clean(out), G.codomain)


def chaos_dot(F: ChaosExpansion, G: ChaosExpansion) -> ChaosExpansion:
    """Pointwise pairing <F, G> as a scalar expansion (E against E*)."""
    if F.codomain.m != G.codomain.m:
        raise ValueError("pairing requires equal dimensions")
    F, G = merge_bases(F, G)
    scalar = BanachSpaceSpec(1, 2.0)
    out = ChaosExpansion(F.basis, {}, scalar)
    for comp in range(F.codomain.m):
        fc = ChaosExpansion(
            F.basis, {a: c[comp : comp + 1] for a, c in F.coeffs.items()}, scalar
        )
        gc = ChaosExpansion(
            G.basis, {a: c[comp : comp + 1] for a, c in G.coeffs.items()}, scalar
        )
        out = chaos_add(out, chaos_multiply(fc, gc))
    return out


# ---------------------------------------------------------------------------
# expectation, conditioning, projections, pairings
# ---------------------------------------------------------------------------


def expectation(F: ChaosExpansion) -> np.ndarray:
    """E(F): the empty-multi-index coefficient."""
    return F.coefficient(EMPTY)


def _split_directions(
    basis: Sequence[StepFunction], t: float, tol: float = 1e-12
) -> tuple[set[int], set[int]]:
    """Classify basis directions as past ([0,t]-supported) or future."""
    past, future = set(), set()
    for j, f in enumerate(basis):
        lo, hi = f.support_bounds()
        if hi <= t + tol:
            past.add(j)
        elif lo >= t - tol:
            future.add(j)
        else:
            raise ValueError(
                f"basis direction {j} straddles t={t}; refine the basis at t"
            )
    return past, future


def conditional_expectation(F: ChaosExpansion, t: float) -> ChaosExpansion:
    """E(F | F_t): drops every coefficient touching a future direction.

    Requires each basis function to be supported in [0,t] or in (t,T].
    """
    _, future = _split_directions(F.basis, t)
    kept = {
        a: c
        for a, c in F.coeffs.items()
        if not any(j in future for j in a.directions)
    }
    return ChaosExpansion(F.basis, kept, F.codomain)


def l2_pairing(F: ChaosExpansion, G: ChaosExpansion) -> float:
    """E <F, G> = sum_alpha alpha! <c_alpha(F), c_alpha(G)> (exact)."""
    if F.codomain.m != G.codomain.m:
        raise ValueError("pairing requires equal dimensions")
    F, G = merge_bases(F, G)
    total = 0.0
    for a, c in F.coeffs.items():
        g = G.coeffs.get(a)
        if g is not None:
            total += a.factorial() * float(np.dot(c, g))
    return total


def hchaos_pairing(X: HChaos, Y: HChaos) -> float:
    """E <X, Y> with the trace pairing on operator values (exact)."""
    _require_same_basis(X.basis, Y.basis)
    total = 0.0
    for a, u in X.coeffs.items():
        v = Y.coeffs.get(a)
        if v is not None:
            total += a.factorial() * float(np.sum(u * v))
    return total


def l2_norm(F: ChaosExpansion) -> float:
    """Hilbertian L2(Omega; l2) norm used by contraction checks."""
    return math.sqrt(sum(a.factorial() * float(np.dot(c, c)) for a, c in F.coeffs.items()))


def pi_gaussian_projection(F: ChaosExpansion, N: int) -> ChaosExpansion:
    """Keep the degree-1 coefficients in the first N directions, zero the rest."""
    if not (0 <= N <= len(F.basis)):
        raise ValueError(f"N must lie in [0, {len(F.basis)}]")
    kept = {
        a: c
        for a, c in F.coeffs.items()
        if a.degree == 1 and a.directions[0] < N
    }
    return ChaosExpansion(F.basis, kept, F.codomain)


# ---------------------------------------------------------------------------
# derivative and divergence
# ---------------------------------------------------------------------------


def malliavin_derivative(F: ChaosExpansion) -> HChaos:
    """Exact degree lowering: direction j maps He_alpha to alpha_j He_{alpha-e_j}."""
    m, M = F.codomain.m, len(F.basis)
    out: dict[MultiIndex, np.ndarray] = {}
    for a, c in F.coeffs.items():
        for j, deg in a.entries:
            b = a.lower(j)
            out.setdefault(b, np.zeros((m, M)))[:, j] += deg * c
    return HChaos(F.basis, out, F.codomain)


def apply_hchaos(X: HChaos, h: StepFunction) -> ChaosExpansion:
    """The E-valued variable X(h)."""
    coords = np.array([inner_product(b, h) for b in X.basis])
    coeffs = {a: u @ coords for a, u in X.coeffs.items()}
    return ChaosExpansion(X.basis, _clean(coeffs), X.codomain)


def derivative_contraction(X: HChaos) -> ChaosExpansion:
    """R(Df) summed over terms: contract the lowering of the scalar part of
    each term against its operator columns."""
    corr: dict[MultiIndex, np.ndarray] = {}
    for a, u in X.coeffs.items():
        for j, deg in a.entries:
            b = a.lower(j)
            corr.setdefault(b, np.zeros(X.codomain.m))
            corr[b] = corr[b] + deg * u[:, j]
    return ChaosExpansion(X.basis, _clean(corr), X.codomain)


def divergence(
    X: HChaos, cap: int = DEGREE_CAP, correction_sign: float = -1.0
) -> ChaosExpansion:
    """Divergence of an operator-valued expansion.

    Computed term by term as  sum_j W(psi_j) f tensor R psi_j  plus
    ``correction_sign`` times R(Df), using the exact chaos product for the
    first factor.  The default sign -1 is the correct one; flipping it is a
    fault-injection hook for sensitivity canaries in the check suite.
    """
    scalar = BanachSpaceSpec(1, 2.0)
    result = ChaosExpansion(X.basis, {}, X.codomain)
    cols = hchaos_columns(X)
    for j, col in enumerate(cols):
        if not col.coeffs:
            continue
        wj = first_chaos(X.basis, np.eye(len(X.basis))[j], np.ones(1), scalar)
        result = chaos_add(result, chaos_multiply(wj, col, cap=cap))
    correction = derivative_contraction(X)
    return chaos_add(result, chaos_scale(correction, correction_sign))


def divergence_with_family(X: HChaos, rotation: np.ndarray, cap: int = DEGREE_CAP):
    """Divergence computed over the rotated orthonormal family Q @ psi.

    ``rotation`` must be orthogonal; the result should agree with
    ``divergence(X)`` to rounding, whatever the rotation.
    """
    q = np.asarray(rotation, dtype=float)
    M = len(X.basis)
    if q.shape != (M, M) or not np.allclose(q @ q.T, np.eye(M), atol=1e-10):
        raise ValueError("rotation must be an orthogonal MxM matrix")
    scalar = BanachSpaceSpec(1, 2.0)
    result = ChaosExpansion(X.basis, {}, X.codomain)
    for i in range(M):
        # column of X along the rotated direction h_i = sum_k q[i,k] psi_k
        coeffs = {a: u @ q[i] for a, u in X.coeffs.items()}
        col = ChaosExpansion(X.basis, _clean(coeffs), X.codomain)
        if not col.coeffs:
            continue
        wi = first_chaos(X.basis, q[i], np.ones(1), scalar)
        result = chaos_add(result, chaos_multiply(wi, col, cap=cap))
    corr: dict[MultiIndex, np.ndarray] = {}
    for a, u in X.coeffs.items():
        for j, deg in a.entries:
            b = a.lower(j)
            corr.setdefault(b, np.zeros(X.codomain.m))
            corr[b] = corr[b] + deg * u[:, j]
    correction = ChaosExpansion(X.basis, _clean(corr), X.codomain)
    return chaos_add(result, chaos_scale(correction, -1.0))


def hchaos_dot_vector(X: HChaos, G: ChaosExpansion) -> HChaos:
    """The H-valued pairing <X, G>: scalar-expansion columns <X psi_j, G>."""
    cols = hchaos_columns(X)
    paired = [chaos_dot(col, G) for col in cols]
    return hchaos_from_columns(X.basis, paired)


# ---------------------------------------------------------------------------
# pathwise evaluation
# ---------------------------------------------------------------------------


def hermite_values(x: np.ndarray, max_degree: int) -> np.ndarray:
    """He_0..He_max stacked along the first axis (recurrence, vectorized)."""
    x = np.asarray(x, dtype=float)
    out = np.empty((max_degree + 1,) + x.shape)
    out[0] = 1.0
    if max_degree >= 1:
        out[1] = x
    for n in range(1, max_degree):
        out[n + 1] = x * out[n] - n * out[n - 1]
    return out


def evaluate_chaos(
    F: ChaosExpansion, path: BrownianPath | PathBatch
) -> np.ndarray:
    """Pathwise value of F; shape (m,) for a path, (B, m) for a batch."""
    xs = [evaluate_W(path, b) for b in F.basis]
    max_deg = F.max_degree
    tables = [hermite_values(np.asarray(x), max_deg) for x in xs]
    batch = isinstance(path, PathBatch)
    shape = (path.n_paths, F.codomain.m) if batch else (F.codomain.m,)
    total = np.zeros(shape)
    for a, c in F.coeffs.items():
        term = np.ones(shape[:-1] or ())
        for j, deg in a.entries:
            term = term * tables[j][deg]
        total += np.multiply.outer(term, c) if batch else term * c
    return total
