"""Finite-dimensional target spaces and Gaussian operator norms.

The target space E is R^m with a pluggable l^p norm (p = 2 is the Hilbert
case; p = 1 and p = inf serve as non-Hilbert controls).  Operators from the
step-function space into E carry a Gaussian norm gamma(R) defined through
E || sum_j g_j R b_j ||^2 over an orthonormal family (b_j); for p = 2 this is
the Frobenius norm of the coefficient matrix, otherwise it is computed by
tensor quadrature or Monte Carlo with a reported standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .quadrature import tensor_gauss_hermite
from .rng import substream
from .timegrid import StepFunction, gram_schmidt, inner_product, step_equal

BASIS_ATOL = 1e-8


@dataclass(frozen=True)
class BanachSpaceSpec:
    """R^m with the l^p norm; use p=math.inf for the max norm."""

    m: int
    p: float = 2.0

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("dimension must be >= 1")
        if not (self.p >= 1.0):
            raise ValueError("norm exponent must satisfy p >= 1")

    @property
    def is_hilbert(self) -> bool:
        return self.p == 2.0

    def norm(self, x: np.ndarray) -> np.ndarray | float:
        """l^p norm along the last axis (scalar for 1-d input)."""
        x = np.asarray(x, dtype=float)
        if math.isinf(self.p):
            out = np.max(np.abs(x), axis=-1)
        elif self.p == 2.0:
            out = np.sqrt(np.sum(x * x, axis=-1))
        elif self.p == 1.0:
            out = np.sum(np.abs(x), axis=-1)
        else:
            out = np.sum(np.abs(x) ** self.p, axis=-1) ** (1.0 / self.p)
        return float(out) if out.ndim == 0 else out

    def dual(self) -> "BanachSpaceSpec":
        """l^q with 1/p + 1/q = 1; the pairing is the Euclidean dot product."""
        if math.isinf(self.p):
            return BanachSpaceSpec(self.m, 1.0)
        if self.p == 1.0:
            return BanachSpaceSpec(self.m, math.inf)
        return BanachSpaceSpec(self.m, self.p / (self.p - 1.0))


@dataclass(frozen=True)
class GammaOperator:
    """Finite-rank operator on the span of an orthonormal step-function family.

    Column j of ``matrix`` is the image of ``domain_basis[j]``; the operator
    annihilates the orthogonal complement of the span.
    """

    domain_basis: tuple[StepFunction, ...]
    matrix: np.ndarray  # (m, K)
    codomain: BanachSpaceSpec

    def __post_init__(self) -> None:
        mat = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if mat.shape != (self.codomain.m, len(self.domain_basis)):
            raise ValueError(
                f"matrix shape {mat.shape} does not match "
                f"({self.codomain.m}, {len(self.domain_basis)})"
            )
        mat = mat.copy()
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "domain_basis", tuple(self.domain_basis))
        _check_orthonormal(self.domain_basis)

    @property
    def rank_bound(self) -> int:
        return len(self.domain_basis)

    def apply(self, h: StepFunction) -> np.ndarray:
        coords = np.array([inner_product(h, b) for b in self.domain_basis])
        return self.matrix @ coords


def _check_orthonormal(basis: Sequence[StepFunction]) -> None:
    for i, bi in enumerate(basis):
        for j in range(i, len(basis)):
            g = inner_product(bi, basis[j])
            want = 1.0 if i == j else 0.0
            if abs(g - want) > BASIS_ATOL:
                raise ValueError(
                    f"domain basis is not orthonormal: <b{i}, b{j}> = {g}"
                )


def rank_one(h: StepFunction, x: np.ndarray, codomain: BanachSpaceSpec) -> GammaOperator:
    """The operator f -> <f, h> x."""
    nrm = h.norm()
    if nrm == 0.0:
        raise ValueError("rank-one direction must be nonzero")
    from .timegrid import step_scale

    col = nrm * np.asarray(x, dtype=float)
    return GammaOperator((step_scale(h, 1.0 / nrm),), col[:, None], codomain)


@dataclass(frozen=True)
class GammaNormEstimate:
    value: float
    halfwidth: float  # one standard error; 0 for deterministic methods
    method: str
    samples: int = 0


def expected_norm_sq(
    mat: np.ndarray,
    space: BanachSpaceSpec,
    method: str = "auto",
    order: int = 16,
    samples: int = 4096,
    seed: int = 0,
    stream: int = 0,
) -> tuple[float, float]:
    """E ||M g||^2 with g standard Gaussian; returns (value, standard error)."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    k = mat.shape[1]
    if method == "auto":
        if space.is_hilbert:
            method = "exact"
        elif k * space.m <= 8:
            method = "quad"
        else:
            method = "mc"
    if method == "exact":
        if not space.is_hilbert:
            raise ValueError(
                "closed-form Gaussian second moments exist only for the l2 "
                "(Hilbert) norm; use quad or mc"
            )
        return float(np.sum(mat * mat)), 0.0
    if method == "quad":
        pts, wts = tensor_gauss_hermite(k, order)
        vals = space.norm(pts @ mat.T) ** 2
        return float(wts @ vals), 0.0
    if method == "mc":
        if samples < 2:
            raise ValueError("mc mode needs at least 2 samples")
        rng = substream(seed, stream)
        g = rng.standard_normal((samples, k))
        vals = np.asarray(space.norm(g @ mat.T)) ** 2
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / np.sqrt(samples))
        return mean, se
    raise ValueError(f"unknown method {method!r}")


def gamma_norm(
    R: GammaOperator,
    mode: str = "auto",
    samples: int = 4096,
    seed: int = 0,
    order: int = 16,
) -> GammaNormEstimate:
    """The Gaussian norm of R, with a one-standard-error halfwidth in mc mode.

    mode 'exact' (l2 codomain only) returns the Frobenius norm of the matrix;
    'quad' uses a tensor rule over the domain dimension; 'mc' averages
    ||M g||^2 over Gaussian draws.  The estimate does not depend on the choice
    of orthonormal basis for the domain span.
    """
    if mode == "exact" and not R.codomain.is_hilbert:
        raise ValueError(
            "exact mode is closed-form only for the l2 codomain; "
            "use mode='quad' or mode='mc'"
        )
    mean, se = expected_norm_sq(
        R.matrix, R.codomain, method=mode, order=order, samples=samples, seed=seed
    )
    if mean <= 0.0:
        return GammaNormEstimate(0.0, se, mode, samples)
    value = math.sqrt(mean)
    half = se / (2.0 * value) if se else 0.0
    used = samples if se else 0
    return GammaNormEstimate(value, half, mode, used)


def trace_pairing(S: GammaOperator, R: GammaOperator) -> float:
    """tr(S* R) = sum_j <R b_j, S b_j> over an orthonormal basis of both spans."""
    if S.codomain.m != R.codomain.m:
        raise ValueError("codomain dimensions differ")
    if len(S.domain_basis) == len(R.domain_basis) and all(
        a is b or step_equal(a, b) for a, b in zip(S.domain_basis, R.domain_basis)
    ):
        return float(np.sum(S.matrix * R.matrix))
    phi, _ = gram_schmidt(list(R.domain_basis) + list(S.domain_basis))
    cr = np.array([[inner_product(b, f) for f in phi] for b in R.domain_basis])
    cs = np.array([[inner_product(b, f) for f in phi] for b in S.domain_basis])
    return float(np.einsum("mk,mk->", R.matrix @ cr, S.matrix @ cs))


@dataclass(frozen=True)
class OperatorFamily:
    """A finite family of linear maps between two normed specs."""

    members: tuple[np.ndarray, ...]
    domain: BanachSpaceSpec
    codomain: BanachSpaceSpec

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("operator family must be non-empty")
        mats = []
        for t in self.members:
            t = np.atleast_2d(np.asarray(t, dtype=float))
            if t.shape != (self.codomain.m, self.domain.m):
                raise ValueError(
                    f"member shape {t.shape} does not match "
                    f"({self.codomain.m}, {self.domain.m})"
                )
            t = t.copy()
            t.setflags(write=False)
            mats.append(t)
        object.__setattr__(self, "members", tuple(mats))


def gamma_bound_hilbert(family: OperatorFamily) -> float:
    """Exact Gaussian bound for l2 -> l2 families: the max spectral norm."""
    if not (family.domain.is_hilbert and family.codomain.is_hilbert):
        raise ValueError("closed form requires l2 domain and codomain")
    return max(float(np.linalg.norm(t, 2)) for t in family.members)


def gamma_bound_estimate(
    family: OperatorFamily,
    n_vectors: int = 4,
    trials: int = 200,
    seed: int = 0,
    samples: int = 2048,
) -> float:
    """Empirical lower bound for the Gaussian bound of the family.

    Each trial draws members T_j and Gaussian vectors x_j and evaluates
    (E||sum_j g_j T_j x_j||^2 / E||sum_j g_j x_j||^2)^(1/2); the maximum over
    trials is returned.  Monotone non-decreasing in ``trials``.
    """
    if trials < 1 or n_vectors < 1:
        raise ValueError("trials and n_vectors must be >= 1")
    best = 0.0
    for trial in range(trials):
        rng = substream(seed, trial)
        idx = rng.integers(0, len(family.members), size=n_vectors)
        xs = rng.standard_normal((family.domain.m, n_vectors))
        txs = np.stack(
            [family.members[i] @ xs[:, j] for j, i in enumerate(idx)], axis=1
        )
        num, _ = expected_norm_sq(
            txs, family.codomain, samples=samples, seed=seed, stream=trial
        )
        den, _ = expected_norm_sq(
            xs, family.domain, samples=samples, seed=seed, stream=trial
        )
        if den > 0:
            best = max(best, math.sqrt(num / den))
    return best


@dataclass(frozen=True)
class LiftCheckReport:
    lhs: float
    rhs: float
    bound: float
    slack: float
    passed: bool


def lift_check(
    family: OperatorFamily,
    R_list: Sequence[GammaOperator],
    seed: int = 0,
    bound: float | None = None,
    rtol: float = 1e-9,
) -> LiftCheckReport:
    """Check the composition inequality for lifted operators.

    Verifies E||sum_j g_j (T_j o R_j)||_gamma^2 <= C^2 E||sum_j g_j R_j||_gamma^2
    with T_j drawn from the family and C the family's Gaussian bound (exact in
    the Hilbert case, otherwise an estimate).  Both sides reduce to sums of
    squared Gaussian norms because the g_j are independent.
    """
    if not R_list:
        raise ValueError("need at least one operator")
    e_space = R_list[0].codomain
    if family.domain.m != e_space.m:
        raise ValueError("family domain does not match operator codomain")
    rng = substream(seed)
    idx = rng.integers(0, len(family.members), size=len(R_list))
    lhs = 0.0
    rhs = 0.0
    for j, R in enumerate(R_list):
        t = family.members[idx[j]]
        lhs += expected_norm_sq(
            t @ R.matrix, family.codomain, samples=4096, seed=seed, stream=2 * j
        )[0]
        rhs += expected_norm_sq(
            R.matrix, e_space, samples=4096, seed=seed, stream=2 * j + 1
        )[0]
    if bound is None:
        if family.domain.is_hilbert and family.codomain.is_hilbert:
            bound = gamma_bound_hilbert(family)
        else:
            bound = gamma_bound_estimate(family, trials=400, seed=seed)
    slack = bound * bound * rhs - lhs
    passed = lhs <= bound * bound * rhs * (1.0 + rtol) + rtol
    return LiftCheckReport(lhs, rhs, bound, slack, passed)


def _paley_walsh_differences(
    space: BanachSpaceSpec, depth: int, rng: np.random.Generator
) -> np.ndarray:
    """Random dyadic martingale differences, evaluated on all 2^depth points.

    Returns an array of shape (depth, 2^depth, m): entry j is
    d_j = phi_j(r_1, ..., r_{j-1}) * r_j with Gaussian atom values phi_j.
    """
    n_points = 1 << depth
    # bit j of each point encodes the sign r_{j+1}
    bits = (np.arange(n_points)[:, None] >> np.arange(depth)) & 1
    signs = 2.0 * bits - 1.0  # (P, depth)
    diffs = np.empty((depth, n_points, space.m))
    for j in range(depth):
        atoms = rng.standard_normal((1 << j, space.m))
        atom_idx = np.zeros(n_points, dtype=int)
        for b in range(j):
            atom_idx |= (bits[:, b] << b)
        diffs[j] = atoms[atom_idx] * signs[:, j : j + 1]
    return diffs


def umd_transform_ratio(
    space: BanachSpaceSpec,
    p: float,
    depth: int = 8,
    trials: int = 20,
    seed: int = 0,
) -> float:
    """Largest observed martingale-transform ratio; a lower bound for the
    unconditionality constant of the space.

    Both p-th moments are computed exactly by enumerating the 2^depth dyadic
    sample points.  All sign patterns are scanned when depth <= 10, otherwise a
    1024-pattern random subset.
    """
    if not (1.0 < p < math.inf):
        raise ValueError("p must lie in (1, inf)")
    if depth > 12:
        raise ValueError("depth > 12 would enumerate more than 4096 points")
    best = 0.0
    for trial in range(trials):
        rng = substream(seed, trial)
        diffs = _paley_walsh_differences(space, depth, rng)  # (n, P, m)
        base = diffs.sum(axis=0)
        denom = float(np.mean(space.norm(base) ** p)) ** (1.0 / p)
        if denom == 0.0:
            continue
        if depth <= 10:
            n_pat = 1 << depth
            pat_bits = (np.arange(n_pat)[:, None] >> np.arange(depth)) & 1
            eps = 2.0 * pat_bits - 1.0
        else:
            eps = rng.choice([-1.0, 1.0], size=(1024, depth))
        # transformed sums for all patterns at once: (n_pat, P, m)
        transformed = np.einsum("ej,jpm->epm", eps, diffs)
        nums = np.mean(np.asarray(space.norm(transformed)) ** p, axis=1) ** (1.0 / p)
        best = max(best, float(np.max(nums)) / denom)
    return best


def operator_to_json(R: GammaOperator) -> dict:
    from .timegrid import step_to_json

    return {
        "basis": [step_to_json(b) for b in R.domain_basis],
        "matrix": R.matrix.tolist(),
        "codomain": {"m": R.codomain.m, "p": R.codomain.p},
    }


def operator_from_json(obj: dict) -> GammaOperator:
    from .timegrid import step_from_json

    space = BanachSpaceSpec(obj["codomain"]["m"], obj["codomain"]["p"])
    basis = tuple(step_from_json(b) for b in obj["basis"])
    return GammaOperator(basis, np.asarray(obj["matrix"]), space)
