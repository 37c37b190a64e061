"""Dyadic polygonal approximations of Brownian motion.

``w(k)`` interpolates a Brownian sample linearly between the nodes
``l 2^-k``; ``z(k) = w(k+1) - w(k)`` is a row of tents supported on the
level-k cells. The module also provides the cross integrals
``J[x, y]_{s,t} = int_s^t (x_u - x_s) (x) dy_u`` and a Monte Carlo study of
how fast the corrections ``z(k)`` shrink in Besov norms.
"""
from __future__ import annotations

from dataclasses import dataclass
import csv
import io
import logging

import numpy as np
from numba import njit
from scipy.special import logsumexp

from .norms import BesovParams, _besov_weights
from .rng import DEFAULT_SEED, map_chunks, stream
from .rough_core import (
    GridError,
    SampledPath,
    TimeGrid,
    common_grid,
    lift_piecewise_linear,
)

log = logging.getLogger(__name__)

K_MAX_LIMIT = 20


def brownian_values(rng: np.random.Generator, n_paths: int, n_steps: int, d: int) -> np.ndarray:
    """Based Brownian node values, shape ``(n_paths, n_steps + 1, d)``."""
    inc = rng.standard_normal((n_paths, n_steps, d)) * np.sqrt(1.0 / n_steps)
    out = np.zeros((n_paths, n_steps + 1, d))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


@dataclass(frozen=True)
class DyadicFamily:
    """A Brownian sample at resolution ``2^k_max`` and its dyadic views."""

    base: SampledPath
    k_max: int

    def __post_init__(self):
        if self.base.grid.n_steps != 2**self.k_max:
            raise GridError("base sample must live on the 2^k_max grid")

    @property
    def dim(self) -> int:
        return self.base.dim

    def _check(self, k, top):
        if not 0 <= k <= top:
            raise ValueError(f"level {k} outside [0, {top}]")

    def level(self, k: int) -> SampledPath:
        """``w(k)``: the base sample read at the nodes ``l 2^-k``."""
        self._check(k, self.k_max)
        stride = 2 ** (self.k_max - k)
        return SampledPath(TimeGrid(2**k), self.base.values[::stride])


def sample_brownian(d: int, k_max: int, seed: int = DEFAULT_SEED) -> DyadicFamily:
    """Sample ``w`` on the ``2^k_max`` grid; reproducible under ``seed``."""
    if not 0 <= k_max <= K_MAX_LIMIT:
        raise ValueError(f"k_max must lie in [0, {K_MAX_LIMIT}], got {k_max}")
    vals = brownian_values(stream(seed, 0), 1, 2**k_max, d)[0]
    return DyadicFamily(SampledPath(TimeGrid(2**k_max), vals), k_max)


def tent_formula(t, k: int, w) -> np.ndarray:
    """Evaluate ``z(k)_t`` from the closed form.

    On ``[(j-1)/2^k, j/2^k]``:
    ``2^k min(t - (j-1)/2^k, j/2^k - t) (2 w((2j-1)/2^(k+1)) - w((j-1)/2^k) - w(j/2^k))``.
    ``w`` is any callable returning path values at an array of times.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    scale = 2.0**k
    j = np.clip(np.ceil(t * scale), 1, scale)
    left, right = (j - 1) / scale, j / scale
    mid = (2 * j - 1) / (2 * scale)
    bump = scale * np.minimum(t - left, right - t)
    return bump[:, None] * (2 * w(mid) - w(left) - w(right))


def midpoint_increment(family: DyadicFamily, k: int) -> SampledPath:
    """``z(k)`` on the ``2^(k+1)`` grid, built from the explicit tent formula."""
    if not 0 <= k < family.k_max:
        raise ValueError(f"need 0 <= k < k_max = {family.k_max}, got {k}")
    grid = TimeGrid(2 ** (k + 1))
    fine = family.level(k + 1)
    return SampledPath(grid, tent_formula(grid.times, k, fine.at))


@dataclass(frozen=True)
class CrossIntegral:
    """``J[x, y]`` for piecewise linear ``x, y`` on a common grid.

    Satisfies ``J_{s,t} = J_{s,u} + J_{u,t} + X1_{s,u} (x) Y1_{u,t}``, so it is
    stored through its values from 0, like a rough path.
    """

    grid: TimeGrid
    x0: np.ndarray   # x_t - x_0 at nodes
    y: np.ndarray    # y_t at nodes
    prefix: np.ndarray  # J_{0,t_j}

    def increment_idx(self, i: int, j: int) -> np.ndarray:
        return self.prefix[j] - self.prefix[i] - np.outer(self.x0[i], self.y[j] - self.y[i])

    def increment(self, s: float, t: float) -> np.ndarray:
        return self.increment_idx(self.grid.index(s), self.grid.index(t))

    def table(self, rows=slice(None)) -> np.ndarray:
        return cross_pairs(self.x0, self.y, self.prefix, rows)


def cross_prefix(x: np.ndarray, y: np.ndarray):
    """``(x - x_0, J[x,y]_{0,t_j})`` for node arrays with leading batch axes."""
    dx = np.diff(x, axis=-2)
    dy = np.diff(y, axis=-2)
    x0 = x - x[..., :1, :]
    cells = (x0[..., :-1, :] + 0.5 * dx)[..., :, None] * dy[..., None, :]
    zeros = np.zeros(cells.shape[:-3] + (1,) + cells.shape[-2:])
    return x0, np.concatenate([zeros, np.cumsum(cells, axis=-3)], axis=-3)


def cross_pairs(x0, y, prefix, rows=slice(None)) -> np.ndarray:
    """``J_{s,t}`` for ``s`` in ``rows`` and every ``t``."""
    dy = y[..., None, :, :] - y[..., rows, None, :]
    return (
        prefix[..., None, :, :, :]
        - prefix[..., rows, None, :, :]
        - x0[..., rows, None, :, None] * dy[..., None, :]
    )


def cross_integral(x: SampledPath, y: SampledPath) -> CrossIntegral:
    """Exact segment-wise ``J[x, y]``; bilinear in ``(x, y)``."""
    if x.grid != y.grid:
        raise GridError(f"paths on different grids ({x.grid.n_steps} vs {y.grid.n_steps})")
    x0, pre = cross_prefix(x.values, y.values)
    return CrossIntegral(x.grid, x0, y.values, pre)


def level2_decomposition_check(family: DyadicFamily, k: int) -> float:
    """Residual of the algebraic split of ``W(k+1)^2 - W(k)^2``.

    With ``x = w(k+1)``, ``y = w(k)`` and ``z = x - y`` the right side is
    ``J[z,z] + J[z,y] - J[z,y]^T + Y1 (x) (X1 - Y1)``. Returns the largest
    entry of the difference over all node pairs of the ``2^(k+1)`` grid.
    """
    if not 0 <= k < family.k_max:
        raise ValueError(f"need 0 <= k < k_max = {family.k_max}, got {k}")
    x = family.level(k + 1)
    y = family.level(k).refine(x.grid)
    return decomposition_residual(x, y)


def decomposition_residual(x: SampledPath, y: SampledPath) -> float:
    g = common_grid(x.grid, y.grid)
    x, y = x.refine(g), y.refine(g)
    z = x - y
    lhs = lift_piecewise_linear(x).table().second - lift_piecewise_linear(y).table().second
    jzz = cross_integral(z, z).table()
    jzy = cross_integral(z, y).table()
    y1 = y.values[None, :, :] - y.values[:, None, :]
    z1 = z.values[None, :, :] - z.values[:, None, :]
    rhs = jzz + jzy - np.swapaxes(jzy, -1, -2) + y1[..., :, None] * z1[..., None, :]
    iu = np.triu_indices(g.n_steps + 1)
    return float(np.max(np.abs((lhs - rhs)[iu])))


# --- decay experiment -------------------------------------------------------

STATISTICS = ("z_level1", "J_zz", "J_zw", "W1_Z1")
# variance inflation of the tilted cell; near optimal for the level-one 32nd moment
DEFAULT_TILT = 25.0


@dataclass(frozen=True)
class DecayRow:
    k: int
    statistic: str
    estimate: float
    stderr: float
    fitted_slope: float


@dataclass(frozen=True)
class DecayTable:
    params: BesovParams
    rows: tuple
    bound: float
    n_mc: int
    dim: int
    eval_level: int

    def slope(self, statistic: str) -> float:
        return next(r.fitted_slope for r in self.rows if r.statistic == statistic)

    def series(self, statistic: str):
        rows = [r for r in self.rows if r.statistic == statistic]
        return (
            np.array([r.k for r in rows]),
            np.array([r.estimate for r in rows]),
            np.array([r.stderr for r in rows]),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "statistic", "estimate", "stderr", "fitted_slope"])
        for r in self.rows:
            w.writerow([r.k, r.statistic, f"{r.estimate:.10e}", f"{r.stderr:.10e}", f"{r.fitted_slope:.6f}"])
        return buf.getvalue()


@njit(cache=True)
def _pair_kernel(z, w, zx0, jzz, jzw, wt1, wt2, half1, half2):
    """Besov power sums of the four statistics, one pass over node pairs."""
    batch, n, d = z.shape
    out = np.zeros((batch, 4))
    for b in range(batch):
        for s in range(n - 1):
            for t in range(s + 1, n):
                zsq = 0.0
                wsq = 0.0
                for k in range(d):
                    dz = z[b, t, k] - z[b, s, k]
                    dw = w[b, t, k] - w[b, s, k]
                    zsq += dz * dz
                    wsq += dw * dw
                jzz_sq = 0.0
                jzw_sq = 0.0
                for k in range(d):
                    for l in range(d):
                        a = jzz[b, t, k, l] - jzz[b, s, k, l] - zx0[b, s, k] * (z[b, t, l] - z[b, s, l])
                        c = jzw[b, t, k, l] - jzw[b, s, k, l] - zx0[b, s, k] * (w[b, t, l] - w[b, s, l])
                        jzz_sq += a * a
                        jzw_sq += c * c
                out[b, 0] += zsq**half1 * wt1[s, t]
                out[b, 1] += jzz_sq**half2 * wt2[s, t]
                out[b, 2] += jzw_sq**half2 * wt2[s, t]
                out[b, 3] += (wsq * zsq) ** half2 * wt2[s, t]
    return out


def _stat_powers(w_fine, z_fine, w_coarse, n_steps, params):
    """Per-sample Besov power sums of the four statistics on one grid."""
    a1, m1 = params.level1
    a2, m2 = params.level2
    wt1 = _besov_weights(n_steps, 1.0 + m1 * a1)
    wt2 = _besov_weights(n_steps, 1.0 + m2 * a2)
    zx0, jzz_pre = cross_prefix(z_fine, z_fine)
    _, jzw_pre = cross_prefix(z_fine, w_coarse)
    res = _pair_kernel(
        np.ascontiguousarray(z_fine), np.ascontiguousarray(w_coarse), zx0,
        jzz_pre, jzw_pre, wt1, wt2, m1 // 2, m2 // 2,
    )
    return dict(zip(STATISTICS, res.T))


def _refine_nodes(vals: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return vals
    frac = np.arange(factor) / factor
    step = np.diff(vals, axis=1)
    fine = vals[:, :-1, None, :] + frac[None, None, :, None] * step[:, :, None, :]
    b, n, _, d = fine.shape
    return np.concatenate([fine.reshape(b, n * factor, d), vals[:, -1:]], axis=1)


def _log2_slope(ks, est) -> float:
    return float(np.polyfit(np.asarray(ks, float), np.log2(est), 1)[0])


def _level_sample(rng, size: int, k: int, d: int, tilt: float):
    """Nodes of ``w(k)`` and ``w(k+1)`` plus importance weights.

    The midpoint displacements ``2 w(mid) - w(left) - w(right) ~ N(0, 2^-k)``
    are drawn as usual except in one uniformly chosen cell per sample, whose
    variance is multiplied by ``tilt``. The weight is the likelihood ratio of
    the true law to this defensive mixture, so it never exceeds
    ``tilt^(d/2)``; ``tilt = 1`` is plain sampling with unit weights.
    """
    cells = 2**k
    coarse = brownian_values(rng, size, cells, d)
    var = 1.0 / cells
    xi = rng.standard_normal((size, cells, d)) * np.sqrt(var)
    if tilt != 1.0:
        pick = rng.integers(0, cells, size)
        xi[np.arange(size), pick] *= np.sqrt(tilt)
        log_r = -0.5 * d * np.log(tilt) + np.sum(xi * xi, axis=-1) / (2 * var) * (1 - 1 / tilt)
        weight = np.exp(np.log(cells) - logsumexp(log_r, axis=1))
    else:
        weight = np.ones(size)
    fine = np.empty((size, 2 * cells + 1, d))
    fine[:, ::2] = coarse
    fine[:, 1::2] = 0.5 * (coarse[:, :-1] + coarse[:, 1:] + xi)
    return coarse, fine, weight


def decay_experiment(
    params: BesovParams,
    k_range,
    n_mc: int,
    seed: int = DEFAULT_SEED,
    d: int = 1,
    eval_level: int | None = None,
    workers: int = 1,
    tilt: float = DEFAULT_TILT,
) -> DecayTable:
    """L^2 size of the Besov powers of ``z(k)`` and its level-two companions.

    For every ``k`` the four statistics ``||z(k)||^{4m}_{alpha,4m}``,
    ``||J[z,z]||^{2m}``, ``||J[z,w(k)]||^{2m}`` and ``||W(k)^1 (x) Z(k)^1||^{2m}``
    (the last three in ``(2 alpha, 2m)``) are evaluated on the common
    ``2^eval_level`` grid. The estimate is ``sqrt(E[S^2])`` and the slope is a
    least-squares fit of ``log2`` estimate against ``k``.

    ``S^2`` is a high Gaussian power whose mean sits far in the tail of the
    midpoint displacements, so plain sampling underestimates it, and more so
    at coarse levels. ``tilt > 1`` switches on importance sampling (see
    ``_level_sample``); levels are sampled independently.
    """
    if params.decay_exponent <= 0:
        raise ValueError(f"4m - 8m*alpha - 1 must be positive for {params}")
    if not tilt >= 1.0:
        raise ValueError(f"tilt must be >= 1, got {tilt}")
    ks = sorted(int(k) for k in k_range)
    if len(ks) < 2:
        raise ValueError("need at least two levels to fit a slope")
    if eval_level is None:
        eval_level = ks[-1] + 1
    if ks[0] < 0 or ks[-1] + 1 > eval_level or eval_level > K_MAX_LIMIT:
        raise ValueError(f"levels {ks} do not fit under eval_level {eval_level}")
    if n_mc < 20:
        log.warning("decay_experiment: only %d samples; estimates will be noisy", n_mc)
    n_eval = 2**eval_level

    def task(idx, size):
        res = {}
        for k in ks:
            rng = stream(seed, 1, k, idx)
            coarse, fine, weight = _level_sample(rng, size, k, d, tilt)
            wk = _refine_nodes(coarse, 2 ** (eval_level - k))
            wk1 = _refine_nodes(fine, 2 ** (eval_level - k - 1))
            res[k] = (weight, _stat_powers(wk1, wk1 - wk, wk, n_eval, params))
        return res

    parts = map_chunks(task, n_mc, workers=workers, chunk=8)
    rows = []
    est = {s: [] for s in STATISTICS}
    err = {s: [] for s in STATISTICS}
    for k in ks:
        weight = np.concatenate([p[k][0] for p in parts])
        for s in STATISTICS:
            vals = np.concatenate([p[k][1][s] for p in parts])
            sq = weight * vals**2
            mean_sq = float(np.mean(sq))
            l2 = np.sqrt(mean_sq)
            se = float(np.std(sq, ddof=1) / np.sqrt(sq.size)) / (2 * l2) if l2 > 0 else 0.0
            est[s].append(l2)
            err[s].append(se)
    slopes = {s: _log2_slope(ks, est[s]) for s in STATISTICS}
    for i, k in enumerate(ks):
        for s in STATISTICS:
            rows.append(DecayRow(k, s, est[s][i], err[s][i], slopes[s]))
    return DecayTable(params, tuple(rows), -params.decay_exponent, n_mc, d, eval_level)


def increment_moment_bound(k: int, n_mc: int, seed: int = DEFAULT_SEED, d: int = 1, extra_levels: int = 3):
    """Fit ``C`` in ``E|Z(k)_{s,t}|^2 <= C min(2^-k, t - s)``.

    The moment is estimated on every node pair of the ``2^(k+1+extra_levels)``
    grid. Returns ``(C_all, C_within)``, the second restricted to pairs inside
    a single level-``k`` cell.
    """
    top = k + 1 + extra_levels
    n = 2**top
    vals = brownian_values(stream(seed, 2, k), n_mc, n, d)
    wk1 = _refine_nodes(vals[:, :: 2 ** (top - k - 1)], 2 ** (top - k - 1))
    wk = _refine_nodes(vals[:, :: 2 ** (top - k)], 2 ** (top - k))
    z = wk1 - wk
    z1 = z[:, None, :, :] - z[:, :, None, :]
    m2 = np.mean(np.sum(z1 * z1, axis=-1), axis=0)
    idx = np.arange(n + 1)
    gap = (idx[None, :] - idx[:, None]) / n
    bound = np.minimum(2.0**-k, gap)
    upper = gap > 0
    ratio = np.where(upper, m2 / np.where(upper, bound, 1.0), 0.0)
    stride = n // 2**k
    same = upper & ((idx[:, None] // stride) == (np.maximum(idx[None, :] - 1, 0) // stride))
    return float(ratio.max()), float(ratio[same].max()) if same.any() else 0.0
