"""Hölder and Besov norms of two-parameter functions on grid node pairs.

Norms act on ``Y_{s,t}`` for ``s < t``. Vectors use the Euclidean norm and
second-level matrices the Frobenius norm.

The Besov double integral uses a midpoint rule on the node lattice: the node
pair ``(t_i, t_j)`` is the centre of a ``dt x dt`` square, clipped to [0, 1]^2
(half weight for end nodes). Pairs with ``t - s < dt`` are dropped, which
removes the strip along the singular diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

from .rough_core import GridError, Level2RoughPath, pair_increments

# pair-array elements per block; bounds peak memory of the vectorised sums
_BLOCK_ELEMS = 1 << 22


@dataclass(frozen=True)
class BesovParams:
    """Besov exponents ``(alpha, m)``; level one uses integrability ``4m``.

    The constructor checks ``1/3 < alpha < 1/2``, ``alpha - 1/(4m) > 1/3`` and
    ``4m - 8m alpha > 2``.
    """

    alpha: float
    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"m must be a positive integer, got {self.m!r}")
        object.__setattr__(self, "m", int(self.m))
        problems = self.violations()
        if problems:
            raise ValueError(f"inadmissible Besov parameters {self}: " + "; ".join(problems))

    def violations(self) -> list[str]:
        a, m = self.alpha, self.m
        out = []
        if not 1 / 3 < a < 1 / 2:
            out.append("need 1/3 < alpha < 1/2")
        if not a - 1 / (4 * m) > 1 / 3:
            out.append("need alpha - 1/(4m) > 1/3")
        if not 4 * m - 8 * m * a > 2:
            out.append("need 4m - 8m*alpha > 2")
        return out

    @staticmethod
    def admissible(alpha: float, m: int) -> bool:
        try:
            BesovParams(alpha, m)
        except ValueError:
            return False
        return True

    @property
    def level1(self) -> tuple[float, int]:
        return self.alpha, 4 * self.m

    @property
    def level2(self) -> tuple[float, int]:
        return 2 * self.alpha, 2 * self.m

    @property
    def decay_exponent(self) -> float:
        """``(4m - 8m alpha - 1) / 2``, the dyadic L^2 decay rate in log2 units."""
        return (4 * self.m - 8 * self.m * self.alpha - 1) / 2


@lru_cache(maxsize=64)
def _besov_weights(n_steps: int, power: float) -> np.ndarray:
    """``w_i w_j dt^2 / (t_j - t_i)^power`` for ``j > i``, zero elsewhere."""
    dt = 1.0 / n_steps
    w = np.ones(n_steps + 1)
    w[0] = w[-1] = 0.5
    idx = np.arange(n_steps + 1)
    gap = (idx[None, :] - idx[:, None]).astype(float)
    out = np.zeros((n_steps + 1, n_steps + 1))
    upper = gap > 0
    out[upper] = (w[:, None] * w[None, :] * dt * dt)[upper] / (gap[upper] * dt) ** power
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def _holder_weights(n_steps: int, alpha: float) -> np.ndarray:
    idx = np.arange(n_steps + 1)
    gap = (idx[None, :] - idx[:, None]) / n_steps
    out = np.zeros_like(gap)
    upper = gap > 0
    out[upper] = gap[upper] ** (-alpha)
    out.setflags(write=False)
    return out


def _row_blocks(n_rows: int, row_elems: int):
    step = max(1, _BLOCK_ELEMS // max(1, row_elems))
    for r0 in range(0, n_rows, step):
        yield slice(r0, min(n_rows, r0 + step))


def _pair_sq(p1, p2, level: int, rows: slice) -> np.ndarray:
    """Squared norms of the level-``level`` pair values for the given rows of ``s``."""
    if level == 1:
        diff = p1[..., None, :, :] - p1[..., rows, None, :]
        return np.sum(diff * diff, axis=-1)
    _, x2 = pair_increments(p1, p2, rows)
    return np.sum(x2 * x2, axis=(-2, -1))


def _check_level(level):
    if level not in (1, 2):
        raise ValueError(f"level must be 1 or 2, got {level!r}")


def _check_alpha(alpha):
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha!r}")


def besov_power_from_sq(sq_rows, n_steps: int, alpha: float, m: float, rows=slice(None)):
    """Partial Besov sum ``sum |Y|^m w / |t-s|^(1+m alpha)`` over a block of rows.

    ``sq_rows`` holds squared pair norms with leading batch axes; returns the
    per-batch partial sum.
    """
    W = _besov_weights(n_steps, 1.0 + m * alpha)[rows]
    if float(m).is_integer() and int(m) % 2 == 0:
        mag = sq_rows ** (int(m) // 2)
    else:
        mag = np.sqrt(sq_rows) ** m
    return np.einsum("...st,st->...", mag, W)


def besov_from_prefix(p1, p2, n_steps: int, level: int, alpha: float, m: float) -> np.ndarray:
    """Besov norms for prefix arrays with optional leading batch axes."""
    _check_level(level)
    n = n_steps + 1
    d = p1.shape[-1]
    batch = int(np.prod(p1.shape[:-2])) if p1.ndim > 2 else 1
    total = np.zeros(p1.shape[:-2])
    for rows in _row_blocks(n, batch * n * (d if level == 1 else d * d)):
        sq = _pair_sq(p1, p2, level, rows)
        total = total + besov_power_from_sq(sq, n_steps, alpha, m, rows)
    return total ** (1.0 / m)


def holder_from_prefix(p1, p2, n_steps: int, level: int, alpha: float) -> np.ndarray:
    _check_level(level)
    n = n_steps + 1
    d = p1.shape[-1]
    batch = int(np.prod(p1.shape[:-2])) if p1.ndim > 2 else 1
    best = np.zeros(p1.shape[:-2])
    for rows in _row_blocks(n, batch * n * (d if level == 1 else d * d)):
        sq = _pair_sq(p1, p2, level, rows)
        W = _holder_weights(n_steps, alpha)[rows]
        best = np.maximum(best, np.max(np.sqrt(sq) * W, axis=(-2, -1)))
    return best


def holder_norm(X: Level2RoughPath, level: int, alpha: float) -> float:
    """Largest ``|Y_{s,t}| / (t-s)^alpha`` over node pairs ``s < t``.

    For the second level the caller passes the exponent it wants (usually
    ``2 alpha``).
    """
    _check_alpha(alpha)
    p1, p2 = X.prefix
    return float(holder_from_prefix(p1, p2, X.grid.n_steps, level, alpha))


def besov_norm(X: Level2RoughPath, level: int, alpha: float, m: float) -> float:
    """``(iint |Y_{s,t}|^m / |t-s|^(1 + m alpha) ds dt)^(1/m)`` on the grid."""
    _check_alpha(alpha)
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m!r}")
    p1, p2 = X.prefix
    return float(besov_from_prefix(p1, p2, X.grid.n_steps, level, alpha, m))


def _difference_prefix(X: Level2RoughPath, Y: Level2RoughPath):
    if X.grid != Y.grid or X.dim != Y.dim:
        raise GridError("rough paths live on different grids or dimensions")
    (a1, a2), (b1, b2) = X.prefix, Y.prefix
    return a1, a2, b1, b2


def _diff_besov(X, Y, level, alpha, m):
    a1, a2, b1, b2 = _difference_prefix(X, Y)
    n_steps = X.grid.n_steps
    n = n_steps + 1
    total = 0.0
    for rows in _row_blocks(n, n * X.dim * X.dim):
        if level == 1:
            da = a1[None, :, :] - a1[rows, None, :]
            db = b1[None, :, :] - b1[rows, None, :]
            sq = np.sum((da - db) ** 2, axis=-1)
        else:
            _, xa = pair_increments(a1, a2, rows)
            _, xb = pair_increments(b1, b2, rows)
            sq = np.sum((xa - xb) ** 2, axis=(-2, -1))
        total += float(besov_power_from_sq(sq, n_steps, alpha, m, rows))
    return total ** (1.0 / m)


def besov_distance(X: Level2RoughPath, Y: Level2RoughPath, p: BesovParams) -> float:
    """Inhomogeneous Besov rough path metric.

    ``||X1 - Y1||_{alpha, 4m} + ||X2 - Y2||_{2 alpha, 2m}``.
    """
    a1, m1 = p.level1
    a2, m2 = p.level2
    return _diff_besov(X, Y, 1, a1, m1) + _diff_besov(X, Y, 2, a2, m2)


@dataclass(frozen=True)
class EmbeddingReport:
    holder: float
    besov: float
    holder_exponent: float
    degenerate: bool

    @property
    def ratio(self) -> float:
        return math.nan if self.degenerate else self.holder / self.besov


def embedding_check(X: Level2RoughPath, p: BesovParams) -> EmbeddingReport:
    """Compare the level-one Hölder norm at ``alpha - 1/(4m)`` with the
    ``(alpha, 4m)`` Besov norm. The ratio should stay bounded as grids refine.
    """
    alpha, m4 = p.level1
    exponent = alpha - 1.0 / m4
    hol = holder_norm(X, 1, exponent)
    bes = besov_norm(X, 1, alpha, m4)
    return EmbeddingReport(hol, bes, exponent, degenerate=(bes == 0.0))


def unit_line_besov(alpha: float, m: float) -> float:
    """Closed form of the Besov norm of ``x_t = t`` in one dimension."""
    q = m * (1.0 - alpha)
    return (1.0 / (q * (q + 1.0))) ** (1.0 / m)
