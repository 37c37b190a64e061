"""Step-2 rough paths on uniform grids of [0, 1].

A rough path is stored as per-cell increments ``(X1, X2)``. Values on a
general pair of grid nodes ``(s, t)`` are produced on demand by Chen
composition of the cells, using prefix products ``X_{0,t}``.

All containers are immutable after construction; arrays are copied and
flagged read-only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np


class GridError(ValueError):
    """Raised for mismatched or off-grid time arguments."""


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i / n_steps`` on [0, 1]."""

    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise GridError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) / self.n_steps

    @property
    def is_dyadic(self) -> bool:
        return self.n_steps & (self.n_steps - 1) == 0

    def index(self, t: float) -> int:
        """Node index of time ``t``; off-grid times are rejected."""
        x = float(t) * self.n_steps
        i = int(round(x))
        if abs(x - i) > 1e-9 or not 0 <= i <= self.n_steps:
            raise GridError(f"time {t!r} is not a node of the {self.n_steps}-step grid")
        return i

    def refinement_factor(self, other: "TimeGrid") -> int:
        """Integer ``f`` with ``other.n_steps == f * self.n_steps``."""
        f, r = divmod(other.n_steps, self.n_steps)
        if r or f < 1:
            raise GridError(f"grid {other.n_steps} does not refine grid {self.n_steps}")
        return f


def common_grid(a: TimeGrid, b: TimeGrid) -> TimeGrid:
    """Finer of two nested grids; both must refine to it exactly."""
    fine = a if a.n_steps >= b.n_steps else b
    coarse = b if fine is a else a
    coarse.refinement_factor(fine)
    return fine


@dataclass(frozen=True)
class SampledPath:
    """An R^d valued path given by its values on the nodes of ``grid``.

    Between nodes the path is understood to be linear.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_steps + 1:
            raise GridError(
                f"expected {self.grid.n_steps + 1} values, got array of shape {v.shape}"
            )
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_values(cls, values) -> "SampledPath":
        v = np.asarray(values, dtype=float)
        return cls(TimeGrid(v.shape[0] - 1), v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    @property
    def is_based(self) -> bool:
        return bool(np.all(self.values[0] == 0))

    def refine(self, grid: TimeGrid) -> "SampledPath":
        """Exact linear interpolation onto a finer nested grid."""
        f = self.grid.refinement_factor(grid)
        if f == 1:
            return self
        frac = np.arange(f) / f
        left = self.values[:-1, None, :]
        step = self.increments[:, None, :]
        fine = (left + frac[None, :, None] * step).reshape(-1, self.dim)
        return SampledPath(grid, np.vstack([fine, self.values[-1:]]))

    def at(self, t) -> np.ndarray:
        """Linear interpolation at arbitrary times in [0, 1]."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        nodes = self.grid.times
        return np.stack(
            [np.interp(t, nodes, self.values[:, j]) for j in range(self.dim)], axis=-1
        )

    def __add__(self, other: "SampledPath") -> "SampledPath":
        g = common_grid(self.grid, other.grid)
        return SampledPath(g, self.refine(g).values + other.refine(g).values)

    def __sub__(self, other: "SampledPath") -> "SampledPath":
        g = common_grid(self.grid, other.grid)
        return SampledPath(g, self.refine(g).values - other.refine(g).values)

    def __neg__(self) -> "SampledPath":
        return SampledPath(self.grid, -self.values)

    def scale(self, c: float) -> "SampledPath":
        return SampledPath(self.grid, c * self.values)


@dataclass(frozen=True)
class CameronMartinPath:
    """Piecewise linear path ``h`` with ``h_0 = 0`` and cellwise constant ``h'``."""

    grid: TimeGrid
    derivative: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.derivative, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_steps:
            raise GridError(
                f"expected {self.grid.n_steps} cell derivatives, got shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("Cameron-Martin derivative must be finite")
        object.__setattr__(self, "derivative", _frozen(v))

    @classmethod
    def zero(cls, grid: TimeGrid, dim: int) -> "CameronMartinPath":
        return cls(grid, np.zeros((grid.n_steps, dim)))

    @classmethod
    def linear(cls, grid: TimeGrid, endpoint) -> "CameronMartinPath":
        """The straight line from 0 to ``endpoint``."""
        v = np.atleast_1d(np.asarray(endpoint, dtype=float))
        return cls(grid, np.tile(v, (grid.n_steps, 1)))

    @classmethod
    def from_path(cls, path: SampledPath) -> "CameronMartinPath":
        return cls(path.grid, path.increments / path.grid.dt)

    @property
    def dim(self) -> int:
        return self.derivative.shape[1]

    @property
    def increments(self) -> np.ndarray:
        return self.derivative * self.grid.dt

    @property
    def values(self) -> np.ndarray:
        return np.vstack([np.zeros((1, self.dim)), np.cumsum(self.increments, axis=0)])

    @property
    def endpoint(self) -> np.ndarray:
        return self.values[-1]

    @property
    def sq_norm(self) -> float:
        """``||h||_H^2 = sum |h'_i|^2 dt``."""
        return float(np.sum(self.derivative**2) * self.grid.dt)

    @property
    def energy(self) -> float:
        return 0.5 * self.sq_norm

    def as_path(self) -> SampledPath:
        return SampledPath(self.grid, self.values)

    def refine(self, grid: TimeGrid) -> "CameronMartinPath":
        f = self.grid.refinement_factor(grid)
        return CameronMartinPath(grid, np.repeat(self.derivative, f, axis=0))

    def __add__(self, other: "CameronMartinPath") -> "CameronMartinPath":
        g = common_grid(self.grid, other.grid)
        return CameronMartinPath(g, self.refine(g).derivative + other.refine(g).derivative)

    def __sub__(self, other: "CameronMartinPath") -> "CameronMartinPath":
        return self + other.scale(-1.0)

    def scale(self, c: float) -> "CameronMartinPath":
        return CameronMartinPath(self.grid, c * self.derivative)


@dataclass(frozen=True)
class GroupElement:
    """Element ``(1, a1, a2)`` of the truncated tensor algebra T^2(R^d)."""

    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        a1 = np.atleast_1d(np.asarray(self.a1, dtype=float))
        a2 = np.asarray(self.a2, dtype=float)
        if a2.shape != (a1.size, a1.size):
            raise ValueError(f"level-2 shape {a2.shape} incompatible with dimension {a1.size}")
        object.__setattr__(self, "a1", _frozen(a1))
        object.__setattr__(self, "a2", _frozen(a2))

    @classmethod
    def identity(cls, d: int) -> "GroupElement":
        return cls(np.zeros(d), np.zeros((d, d)))

    @property
    def dim(self) -> int:
        return self.a1.size

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        return chen_compose(self, other)

    def inverse(self) -> "GroupElement":
        return GroupElement(-self.a1, np.outer(self.a1, self.a1) - self.a2)

    def dilate(self, lam: float) -> "GroupElement":
        return GroupElement(lam * self.a1, lam**2 * self.a2)

    def group_defect(self) -> float:
        """Max-entry violation of ``a2 + a2^T = a1 (x) a1``; zero on G^2(R^d)."""
        return float(np.max(np.abs(self.a2 + self.a2.T - np.outer(self.a1, self.a1))))

    def in_group(self, tol: float = 1e-12) -> bool:
        return self.group_defect() <= tol * max(1.0, float(np.sum(self.a1**2)))


def chen_compose(left: GroupElement, right: GroupElement) -> GroupElement:
    """Tensor product ``left (x) right`` truncated at level 2."""
    return GroupElement(
        left.a1 + right.a1, left.a2 + right.a2 + np.outer(left.a1, right.a1)
    )


def homogeneous_norm(g: GroupElement) -> float:
    """``|a1| + sqrt(|a2|_F)``, a degree-one homogeneous norm on the group."""
    return float(np.linalg.norm(g.a1) + np.sqrt(np.linalg.norm(g.a2)))


def _prefix(first: np.ndarray, second: np.ndarray):
    """Prefix products ``X_{0,t_j}`` for cell increments (leading batch axes allowed)."""
    zeros1 = np.zeros(first.shape[:-2] + (1,) + first.shape[-1:])
    p1 = np.concatenate([zeros1, np.cumsum(first, axis=-2)], axis=-2)
    cross = p1[..., :-1, :, None] * first[..., :, None, :]
    zeros2 = np.zeros(second.shape[:-3] + (1,) + second.shape[-2:])
    p2 = np.concatenate([zeros2, np.cumsum(second + cross, axis=-3)], axis=-3)
    return p1, p2


def pair_increments(p1: np.ndarray, p2: np.ndarray, rows=None):
    """Two-parameter values from prefix products.

    ``X1_{s,t} = P1_t - P1_s`` and ``X2_{s,t} = P2_t - P2_s - P1_s (x) X1_{s,t}``.
    Returns arrays indexed ``[..., s, t, ...]``; only ``s <= t`` is meaningful.
    """
    if rows is None:
        rows = slice(None)
    s1 = p1[..., rows, None, :]
    x1 = p1[..., None, :, :] - s1
    x2 = (
        p2[..., None, :, :, :]
        - p2[..., rows, None, :, :]
        - s1[..., :, None] * x1[..., None, :]
    )
    return x1, x2


@dataclass(frozen=True)
class Level2RoughPath:
    """Per-cell increments of a step-2 rough path.

    ``first[i]`` is ``X1`` over cell ``[t_i, t_{i+1}]`` and ``second[i]`` is
    the matching ``X2``. Any pair of nodes is reached by Chen composition.
    """

    grid: TimeGrid
    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.first, dtype=float)
        s = np.asarray(self.second, dtype=float)
        if f.ndim == 1:
            f = f[:, None]
        n, d = f.shape
        if n != self.grid.n_steps or s.shape != (n, d, d):
            raise GridError(
                f"cell arrays {f.shape}, {s.shape} do not fit a {self.grid.n_steps}-step grid"
            )
        object.__setattr__(self, "first", _frozen(f))
        object.__setattr__(self, "second", _frozen(s))
        p1, p2 = _prefix(f, s)
        p1.setflags(write=False)
        p2.setflags(write=False)
        object.__setattr__(self, "_p1", p1)
        object.__setattr__(self, "_p2", p2)

    @property
    def dim(self) -> int:
        return self.first.shape[1]

    @property
    def prefix(self):
        """``(X1_{0,t_j}, X2_{0,t_j})`` for every node ``j``."""
        return self._p1, self._p2

    @property
    def path(self) -> SampledPath:
        """The based first-level path ``x_t = X1_{0,t}``."""
        return SampledPath(self.grid, self._p1)

    def increment_idx(self, i: int, j: int) -> GroupElement:
        if not 0 <= i <= j <= self.grid.n_steps:
            raise GridError(f"need 0 <= i <= j <= {self.grid.n_steps}, got ({i}, {j})")
        x1 = self._p1[j] - self._p1[i]
        x2 = self._p2[j] - self._p2[i] - np.outer(self._p1[i], x1)
        return GroupElement(x1, x2)

    def increment(self, s: float, t: float) -> GroupElement:
        """``X_{s,t}`` for grid times ``s <= t``."""
        return self.increment_idx(self.grid.index(s), self.grid.index(t))

    def table(self) -> "RoughPathTable":
        x1, x2 = pair_increments(self._p1, self._p2)
        return RoughPathTable(self.grid, x1, x2)

    def refine(self, grid: TimeGrid) -> "Level2RoughPath":
        """Split each cell into ``f`` linear pieces.

        The antisymmetric excess ``X2 - X1 (x) X1 / 2`` of a cell is kept on
        its first sub-cell, so composition over the original cell is unchanged.
        """
        f = self.grid.refinement_factor(grid)
        if f == 1:
            return self
        sub1 = np.repeat(self.first / f, f, axis=0)
        sub2 = 0.5 * sub1[:, :, None] * sub1[:, None, :]
        excess = self.second - 0.5 * self.first[:, :, None] * self.first[:, None, :]
        sub2 = sub2.reshape(self.grid.n_steps, f, self.dim, self.dim).copy()
        sub2[:, 0] += excess
        return Level2RoughPath(grid, sub1, sub2.reshape(-1, self.dim, self.dim))


@dataclass(frozen=True)
class RoughPathTable:
    """A two-parameter function tabulated on all node pairs.

    Not required to be multiplicative; used to diagnose Chen's identity.
    """

    grid: TimeGrid
    first: np.ndarray   # (N+1, N+1, d)
    second: np.ndarray  # (N+1, N+1, d, d)

    def element(self, i: int, j: int) -> GroupElement:
        return GroupElement(self.first[i, j], self.second[i, j])

    def perturbed(self, i: int, j: int, e2) -> "RoughPathTable":
        second = np.array(self.second)
        second[i, j] += np.asarray(e2, dtype=float)
        return RoughPathTable(self.grid, self.first, second)


def lift_piecewise_linear(path: SampledPath) -> Level2RoughPath:
    """Canonical lift ``S_2(x)``: on a linear segment ``X2 = X1 (x) X1 / 2`` exactly."""
    inc = path.increments
    return Level2RoughPath(path.grid, inc, 0.5 * inc[:, :, None] * inc[:, None, :])


def chen_defect(X: Union[Level2RoughPath, RoughPathTable], s: float, u: float, t: float) -> float:
    """``|X1_{s,t} - Y1| + |X2_{s,t} - Y2|_F`` where ``Y = X_{s,u} (x) X_{u,t}``."""
    i, k, j = (X.grid.index(s), X.grid.index(u), X.grid.index(t))
    if not i <= k <= j:
        raise GridError(f"need s <= u <= t, got ({s}, {u}, {t})")
    if isinstance(X, RoughPathTable):
        whole, left, right = X.element(i, j), X.element(i, k), X.element(k, j)
    else:
        whole, left, right = X.increment_idx(i, j), X.increment_idx(i, k), X.increment_idx(k, j)
    comp = chen_compose(left, right)
    return float(np.linalg.norm(whole.a1 - comp.a1) + np.linalg.norm(whole.a2 - comp.a2))


def max_chen_defect(X: Union[Level2RoughPath, RoughPathTable]) -> float:
    """Largest defect over every node triple ``s <= u <= t`` (vectorised)."""
    tab = X.table() if isinstance(X, Level2RoughPath) else X
    n = tab.grid.n_steps + 1
    worst = 0.0
    for k in range(n):
        left1, left2 = tab.first[: k + 1, k], tab.second[: k + 1, k]
        right1, right2 = tab.first[k, k:], tab.second[k, k:]
        comp1 = left1[:, None] + right1[None]
        comp2 = left2[:, None] + right2[None] + left1[:, None, :, None] * right1[None, :, None, :]
        whole1 = tab.first[: k + 1, k:]
        whole2 = tab.second[: k + 1, k:]
        err = np.linalg.norm(whole1 - comp1, axis=-1) + np.sqrt(
            np.sum((whole2 - comp2) ** 2, axis=(-2, -1))
        )
        worst = max(worst, float(err.max()))
    return worst


def geometric_defect(X: Union[Level2RoughPath, RoughPathTable]) -> float:
    """Max-entry violation of ``X2 + X2^T = X1 (x) X1`` over all node pairs."""
    tab = X.table() if isinstance(X, Level2RoughPath) else X
    x1, x2 = tab.first, tab.second
    r = x2 + np.swapaxes(x2, -1, -2) - x1[..., :, None] * x1[..., None, :]
    iu = np.triu_indices(tab.grid.n_steps + 1)
    return float(np.max(np.abs(r[iu]))) if r.size else 0.0


def dilate(X: Level2RoughPath, lam: float) -> Level2RoughPath:
    """``(X1, X2) -> (lam X1, lam^2 X2)``."""
    return Level2RoughPath(X.grid, lam * X.first, lam**2 * X.second)


def _cross_cells(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # integral of (x_u - x_s) (x) dy_u over one cell with both paths linear
    return 0.5 * dx[..., :, None] * dy[..., None, :]


def young_translate(X: Level2RoughPath, h: CameronMartinPath) -> Level2RoughPath:
    """Young translation ``T_h X``.

    ``X1 + H1`` on the first level and ``X2 + H2 + J[x,h] + J[h,x]`` on the
    second, with the cross integrals exact against the piecewise linear ``h``.
    """
    if h.dim != X.dim:
        raise GridError(f"dimension mismatch: path {X.dim}, shift {h.dim}")
    g = common_grid(X.grid, h.grid)
    X = X.refine(g)
    dh = h.refine(g).increments
    dx = X.first
    second = X.second + _cross_cells(dh, dh) + _cross_cells(dx, dh) + _cross_cells(dh, dx)
    return Level2RoughPath(g, dx + dh, second)


def young_pair(X: Level2RoughPath) -> Level2RoughPath:
    """Append the time path ``lambda_t = t`` as the last coordinate."""
    n, d = X.first.shape
    dt = X.grid.dt
    first = np.hstack([X.first, np.full((n, 1), dt)])
    second = np.zeros((n, d + 1, d + 1))
    second[:, :d, :d] = X.second
    second[:, :d, d] = 0.5 * X.first * dt   # int (x_u - x_s) du
    second[:, d, :d] = 0.5 * dt * X.first   # int (u - s) dx_u
    second[:, d, d] = 0.5 * dt * dt
    return Level2RoughPath(X.grid, first, second)


def to_record(X: Level2RoughPath) -> dict:
    """Flat serialisable record: grid size and row-major cell arrays."""
    return {
        "n_steps": X.grid.n_steps,
        "dim": X.dim,
        "first": X.first.ravel().tolist(),
        "second": X.second.ravel().tolist(),
    }


def from_record(rec: dict) -> Level2RoughPath:
    n, d = int(rec["n_steps"]), int(rec["dim"])
    return Level2RoughPath(
        TimeGrid(n),
        np.asarray(rec["first"], dtype=float).reshape(n, d),
        np.asarray(rec["second"], dtype=float).reshape(n, d, d),
    )
