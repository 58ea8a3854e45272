"""Time grids, step functions and Brownian paths.

The Hilbert space carrying the Gaussian process is L2(0,T;R^d) restricted to
functions that are piecewise constant on a finite grid.  Binary operations
refine their operands to the common grid automatically, so the algebra is
total on step functions.  Grid points are deduplicated with an absolute
tolerance of 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .rng import substream

GRID_TOL = 1e-12


class GridError(ValueError):
    """Raised when grids or horizons are incompatible."""


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """A partition 0 = t_0 < t_1 < ... < t_N = T of the time interval."""

    points: tuple[float, ...]

    def __post_init__(self) -> None:
        pts = tuple(float(p) for p in self.points)
        if len(pts) < 2:
            raise GridError("a grid needs at least one interval")
        if abs(pts[0]) > GRID_TOL:
            raise GridError("grid must start at 0")
        if any(b - a <= GRID_TOL for a, b in zip(pts, pts[1:])):
            raise GridError("grid points must be strictly increasing")
        if pts[-1] <= 0:
            raise GridError("horizon must be positive")
        object.__setattr__(self, "points", pts)

    @property
    def horizon(self) -> float:
        return self.points[-1]

    @property
    def n_intervals(self) -> int:
        return len(self.points) - 1

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(np.asarray(self.points))

    def index_of(self, t: float, tol: float = GRID_TOL) -> int:
        """Index i with points[i] == t, up to tolerance."""
        pts = np.asarray(self.points)
        i = int(np.argmin(np.abs(pts - t)))
        if abs(pts[i] - t) > max(tol, 1e-9 * self.horizon):
            raise GridError(f"{t} is not a grid point; refine the grid first")
        return i

    def refine(self, extra: Iterable[float]) -> "TimeGrid":
        """Grid with the union of this grid's points and ``extra``."""
        pts = list(self.points)
        for t in extra:
            t = float(t)
            if t < -GRID_TOL or t > self.horizon + GRID_TOL:
                raise GridError(f"point {t} outside [0, {self.horizon}]")
            pts.append(min(max(t, 0.0), self.horizon))
        return TimeGrid(_dedup(pts))


def _dedup(points: Sequence[float]) -> tuple[float, ...]:
    pts = sorted(points)
    out = [pts[0]]
    for p in pts[1:]:
        if p - out[-1] > GRID_TOL:
            out.append(p)
    return tuple(out)


def uniform_grid(horizon: float, n: int) -> TimeGrid:
    return TimeGrid(tuple(np.linspace(0.0, horizon, n + 1)))


def union_grid(a: TimeGrid, b: TimeGrid) -> TimeGrid:
    if abs(a.horizon - b.horizon) > GRID_TOL:
        raise GridError(f"horizon mismatch: {a.horizon} vs {b.horizon}")
    return TimeGrid(_dedup(list(a.points) + list(b.points)))


@dataclass(frozen=True)
class StepFunction:
    """Piecewise-constant element of L2(0,T;R^d): value i on (t_{i-1}, t_i]."""

    grid: TimeGrid
    values: np.ndarray  # shape (N, d)

    def __post_init__(self) -> None:
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if vals.shape[0] != self.grid.n_intervals:
            raise ValueError(
                f"need {self.grid.n_intervals} interval values, got {vals.shape[0]}"
            )
        object.__setattr__(self, "values", _as_readonly(vals))

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    def norm(self) -> float:
        return float(np.sqrt(inner_product(self, self)))

    def support_bounds(self) -> tuple[float, float]:
        """(earliest, latest) time bracketing the nonzero values; (0,0) if zero."""
        nz = np.flatnonzero(np.any(self.values != 0.0, axis=1))
        if nz.size == 0:
            return (0.0, 0.0)
        pts = self.grid.points
        return (pts[nz[0]], pts[nz[-1] + 1])


def zero_step(grid: TimeGrid, d: int) -> StepFunction:
    return StepFunction(grid, np.zeros((grid.n_intervals, d)))


def step_indicator(
    a: float,
    b: float,
    horizon: float,
    d: int = 1,
    component: int = 0,
    scale: float = 1.0,
) -> StepFunction:
    """scale * 1_{(a,b]} in coordinate ``component`` of R^d."""
    if not (0.0 <= a < b <= horizon + GRID_TOL):
        raise GridError(f"need 0 <= a < b <= {horizon}")
    grid = TimeGrid(_dedup([0.0, a, b, horizon]))
    vals = np.zeros((grid.n_intervals, d))
    mids = (np.asarray(grid.points[:-1]) + np.asarray(grid.points[1:])) / 2
    vals[(mids > a) & (mids < b), component] = scale
    return StepFunction(grid, vals)


def _expand(f: StepFunction, fine: TimeGrid) -> np.ndarray:
    """Values of f on each interval of ``fine``, which must refine f.grid."""
    src = np.asarray(f.grid.points)
    mids = (np.asarray(fine.points[:-1]) + np.asarray(fine.points[1:])) / 2
    idx = np.searchsorted(src, mids) - 1
    return f.values[idx]


def values_on(f: StepFunction, grid: TimeGrid) -> np.ndarray:
    """Per-interval values of f on ``grid``.

    Raises GridError if f genuinely jumps inside an interval of ``grid``
    (constant redundant points are tolerated).
    """
    if f.grid.points == grid.points:
        return f.values
    union = union_grid(f.grid, grid)
    fu = _expand(f, union)
    tgt = np.asarray(grid.points)
    mids = (np.asarray(union.points[:-1]) + np.asarray(union.points[1:])) / 2
    tidx = np.searchsorted(tgt, mids) - 1
    out = np.empty((grid.n_intervals, f.d))
    for i in range(grid.n_intervals):
        sub = fu[tidx == i]
        if sub.shape[0] == 0:
            raise GridError("grid does not cover the horizon")
        if not np.all(sub == sub[0]):
            raise GridError(
                "step function jumps inside a grid interval; "
                "sample on a grid refined by the function's jump points"
            )
        out[i] = sub[0]
    return out


def on_grid(f: StepFunction, grid: TimeGrid) -> StepFunction:
    """Re-express f on (a refinement-compatible) ``grid``."""
    return StepFunction(grid, values_on(f, grid))


def inner_product(f: StepFunction, g: StepFunction) -> float:
    """L2(0,T;R^d) inner product: sum_i dt_i * (f_i . g_i)."""
    if f.d != g.d:
        raise ValueError(f"dimension mismatch: {f.d} vs {g.d}")
    union = union_grid(f.grid, g.grid)
    fu, gu = _expand(f, union), _expand(g, union)
    return float(np.einsum("i,id,id->", union.deltas, fu, gu))


def restrict_before(f: StepFunction, t: float) -> StepFunction:
    """Multiply f by the indicator of [0, t], refining the grid at t."""
    if t < -GRID_TOL or t > f.horizon + GRID_TOL:
        raise GridError(f"restriction time {t} outside [0, {f.horizon}]")
    t = min(max(t, 0.0), f.horizon)
    grid = f.grid.refine([t])
    vals = _expand(f, grid).copy()
    right = np.asarray(grid.points[1:])
    vals[right > t + GRID_TOL] = 0.0
    return StepFunction(grid, vals)


def restrict_after(f: StepFunction, t: float) -> StepFunction:
    """Multiply f by the indicator of (t, T]."""
    if t < -GRID_TOL or t > f.horizon + GRID_TOL:
        raise GridError(f"restriction time {t} outside [0, {f.horizon}]")
    t = min(max(t, 0.0), f.horizon)
    grid = f.grid.refine([t])
    vals = _expand(f, grid).copy()
    right = np.asarray(grid.points[1:])
    vals[right <= t + GRID_TOL] = 0.0
    return StepFunction(grid, vals)


def step_add(f: StepFunction, g: StepFunction) -> StepFunction:
    if f.d != g.d:
        raise ValueError(f"dimension mismatch: {f.d} vs {g.d}")
    union = union_grid(f.grid, g.grid)
    return StepFunction(union, _expand(f, union) + _expand(g, union))


def step_scale(f: StepFunction, c: float) -> StepFunction:
    return StepFunction(f.grid, c * f.values)


def step_equal(f: StepFunction, g: StepFunction, tol: float = 1e-12) -> bool:
    if f.d != g.d or abs(f.horizon - g.horizon) > GRID_TOL:
        return False
    union = union_grid(f.grid, g.grid)
    return bool(np.max(np.abs(_expand(f, union) - _expand(g, union)), initial=0.0) <= tol)


def orthonormalize(grid: TimeGrid, d: int) -> list[StepFunction]:
    """Canonical orthonormal basis: dt_i^{-1/2} 1_{(t_{i-1},t_i]} e_k.

    Ordering is interval-major: index i*d + k for interval i, coordinate k.
    The returned family spans every step function on the grid.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    out = []
    deltas = grid.deltas
    for i in range(grid.n_intervals):
        for k in range(d):
            vals = np.zeros((grid.n_intervals, d))
            vals[i, k] = 1.0 / np.sqrt(deltas[i])
            out.append(StepFunction(grid, vals))
    return out


def gram_schmidt(
    funcs: Sequence[StepFunction], tol: float = 1e-10
) -> tuple[list[StepFunction], np.ndarray]:
    """Orthonormalize a family of step functions (modified Gram-Schmidt).

    Returns (basis, coords) with funcs[j] = sum_k coords[j, k] * basis[k].
    Linearly dependent directions are dropped.
    """
    if not funcs:
        return [], np.zeros((0, 0))
    d = funcs[0].d
    union = funcs[0].grid
    for f in funcs[1:]:
        if f.d != d:
            raise ValueError("mixed dimensions in Gram-Schmidt input")
        union = union_grid(union, f.grid)
    mat = np.stack([_expand(f, union) for f in funcs])  # (n, N, d)
    w = union.deltas

    def ip(u: np.ndarray, v: np.ndarray) -> float:
        return float(np.einsum("i,id,id->", w, u, v))

    basis_vals: list[np.ndarray] = []
    scale = max(np.sqrt(ip(v, v)) for v in mat)
    for v in mat:
        u = v.copy()
        for _ in range(2):  # re-orthogonalize for stability
            for b in basis_vals:
                u = u - ip(u, b) * b
        nrm = np.sqrt(ip(u, u))
        if nrm > tol * max(scale, 1.0):
            basis_vals.append(u / nrm)
    basis = [StepFunction(union, b) for b in basis_vals]
    coords = np.array(
        [[ip(v, b) for b in basis_vals] for v in mat]
    ) if basis_vals else np.zeros((len(funcs), 0))
    return basis, coords


# ---------------------------------------------------------------------------
# Brownian sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BrownianPath:
    """One realization of the cylindrical Brownian motion on a grid."""

    grid: TimeGrid
    increments: np.ndarray  # (N, d), increment i ~ N(0, dt_i * I_d)
    seed: int = 0

    def __post_init__(self) -> None:
        inc = np.atleast_2d(np.asarray(self.increments, dtype=float))
        if inc.shape[0] != self.grid.n_intervals:
            raise ValueError("one increment vector per grid interval required")
        object.__setattr__(self, "increments", _as_readonly(inc))

    @property
    def d(self) -> int:
        return self.increments.shape[1]

    def cumulative(self) -> np.ndarray:
        """W at every grid point, shape (N+1, d); starts at 0."""
        zero = np.zeros((1, self.d))
        return np.concatenate([zero, np.cumsum(self.increments, axis=0)])


@dataclass(frozen=True)
class PathBatch:
    """A batch of independent Brownian paths sharing one grid."""

    grid: TimeGrid
    increments: np.ndarray  # (B, N, d)
    seed: int = 0
    stream: int = 0

    def __post_init__(self) -> None:
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 3 or inc.shape[1] != self.grid.n_intervals:
            raise ValueError("batch increments must have shape (B, N, d)")
        object.__setattr__(self, "increments", _as_readonly(inc))

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    def cumulative(self) -> np.ndarray:
        zero = np.zeros((self.n_paths, 1, self.d))
        return np.concatenate([zero, np.cumsum(self.increments, axis=1)], axis=1)

    def path(self, i: int) -> BrownianPath:
        return BrownianPath(self.grid, self.increments[i], self.seed)


def sample_path(grid: TimeGrid, d: int, seed: int) -> BrownianPath:
    """Deterministic-in-seed Brownian path on the grid."""
    rng = substream(seed)
    inc = rng.standard_normal((grid.n_intervals, d)) * np.sqrt(grid.deltas)[:, None]
    return BrownianPath(grid, inc, seed)


def sample_paths(
    grid: TimeGrid, d: int, n_paths: int, seed: int, stream: int = 0
) -> PathBatch:
    """n_paths independent paths from sub-stream ``stream`` of the seed."""
    rng = substream(seed, stream)
    inc = rng.standard_normal((n_paths, grid.n_intervals, d))
    inc *= np.sqrt(grid.deltas)[None, :, None]
    return PathBatch(grid, inc, seed, stream)


def evaluate_W(path: BrownianPath | PathBatch, h: StepFunction) -> float | np.ndarray:
    """The Gaussian functional W(h) = sum_i h_i . dW_i on the given path(s)."""
    hv = values_on(h, path.grid)
    if isinstance(path, PathBatch):
        return np.einsum("nd,bnd->b", hv, path.increments)
    return float(np.einsum("nd,nd->", hv, path.increments))


def w_at(path: BrownianPath | PathBatch, t: float) -> np.ndarray:
    """Vector W(t) in R^d at a grid point t (per path for a batch)."""
    i = path.grid.index_of(t)
    return path.cumulative()[..., i, :]


def truncate_path(path: BrownianPath | PathBatch, t: float):
    """The path restricted to [0, t]; t must be a grid point."""
    i = path.grid.index_of(t)
    if i == 0:
        raise GridError("cannot truncate to an empty grid; use t > 0")
    sub = TimeGrid(path.grid.points[: i + 1])
    if isinstance(path, PathBatch):
        return PathBatch(sub, path.increments[:, :i, :], path.seed, path.stream)
    return BrownianPath(sub, path.increments[:i, :], path.seed)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def grid_to_json(grid: TimeGrid) -> dict:
    return {"points": list(grid.points)}


def grid_from_json(obj: dict) -> TimeGrid:
    return TimeGrid(tuple(obj["points"]))


def step_to_json(f: StepFunction) -> dict:
    return {"points": list(f.grid.points), "values": f.values.tolist()}


def step_from_json(obj: dict) -> StepFunction:
    return StepFunction(TimeGrid(tuple(obj["points"])), np.asarray(obj["values"]))


def path_to_csv_rows(path: BrownianPath) -> list[list[str]]:
    """Rows (t_i, dW components) for CSV export, headers included."""
    head = ["t"] + [f"dW_{k}" for k in range(path.d)]
    rows = [head]
    for i in range(path.grid.n_intervals):
        rows.append(
            [repr(path.grid.points[i + 1])] + [repr(v) for v in path.increments[i]]
        )
    return rows
