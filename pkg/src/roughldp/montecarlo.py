"""Monte Carlo estimators for small-noise diffusions and their pinned weights.

The diffusion ``dy = sigma(y) o eps dw + b(eps, y) dt`` is simulated with the
step-2 Euler scheme driven by the lift of the polygonal Brownian path, which
gives Stratonovich solutions. The Dirac mass at the target is replaced by a
Gaussian kernel of bandwidth ``eta``, so the pinned weight of an event ``A``
is estimated as ``E[1_A(eps W) psi_eta(y_1)]``.

With a Cameron-Martin shift ``h`` the driver becomes ``eps W + h`` and each
sample carries the weight ``exp(-<h, W>/eps - ||h||^2 / (2 eps^2))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import csv
import io
import json
import logging
import math
from typing import NamedTuple

import numpy as np

from .action import ActionProblem, RateResult, minimize_action, rate_I
from .flow import VectorFieldSystem, covariance_quadrature, davie_steps, integrate_flow, pulled_back_sigma
from .norms import BesovParams, besov_from_prefix
from .rng import DEFAULT_SEED, map_chunks, stream
from .rough_core import CameronMartinPath, GridError, SampledPath, TimeGrid, _prefix, lift_piecewise_linear

log = logging.getLogger(__name__)

MOLLIFIER_NOTE = (
    "Gaussian mollifier in place of a compactly supported kernel; "
    "the estimate targets the density of y_1 convolved with N(0, eta^2 I)"
)
# desk-scale budget on sample-cells per simulation
MAX_CELL_OPS = 10**9
MIN_ESS = 100


# --- kernel ------------------------------------------------------------------


@dataclass(frozen=True)
class MollifierKernel:
    """Normalised Gaussian kernel ``psi_eta(y) = N(y; center, eta^2 I)``."""

    bandwidth: float
    center: np.ndarray

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))

    @classmethod
    def for_eps(cls, eps: float, center, c_eta: float = 0.25) -> "MollifierKernel":
        """Bandwidth ``c_eta * eps``, so the kernel lives on the noise scale."""
        return cls(c_eta * eps, center)

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        n = self.center.size
        sq = np.sum((y - self.center) ** 2, axis=-1)
        return np.exp(-0.5 * sq / self.bandwidth**2) / (2 * np.pi * self.bandwidth**2) ** (n / 2)

    def log(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        n = self.center.size
        sq = np.sum((y - self.center) ** 2, axis=-1)
        return -0.5 * sq / self.bandwidth**2 - 0.5 * n * np.log(2 * np.pi * self.bandwidth**2)


# --- estimates ---------------------------------------------------------------


@dataclass(frozen=True)
class Estimate:
    """Sample mean with standard error and effective sample size."""

    value: float
    stderr: float
    ess: float
    n: int
    hits: int
    flags: tuple = ()

    @property
    def log_value(self) -> float:
        """``log`` of the estimate; raises instead of returning ``-inf``."""
        if not self.value > 0:
            raise ValueError("estimate is zero; its logarithm is undefined")
        return math.log(self.value)


class _Moments(NamedTuple):
    total: float
    total_sq: float
    hits: int
    n: int

    @staticmethod
    def of(v: np.ndarray) -> "_Moments":
        return _Moments(float(np.sum(v)), float(np.sum(v * v)), int(np.count_nonzero(v)), int(v.size))

    def __add__(self, other):
        return _Moments(*(a + b for a, b in zip(self, other)))


def _finish(m: _Moments, flags=()) -> Estimate:
    flags = list(flags)
    if m.n == 0:
        return Estimate(math.nan, math.nan, 0.0, 0, 0, tuple(flags + ["no-samples"]))
    mean = m.total / m.n
    var = max(m.total_sq / m.n - mean * mean, 0.0) * m.n / max(m.n - 1, 1)
    ess = m.total**2 / m.total_sq if m.total_sq > 0 else 0.0
    if m.hits == 0:
        flags.append("zero-hits")
    elif ess < MIN_ESS:
        flags.append(f"low-ess:{ess:.1f}")
    return Estimate(mean, math.sqrt(var / m.n), ess, m.n, m.hits, tuple(flags))


def _combine(parts) -> _Moments:
    out = _Moments(0.0, 0.0, 0, 0)
    for p in parts:
        out = out + p
    return out


# --- simulation --------------------------------------------------------------


def _check_budget(n_mc: int, n_steps: int):
    if n_mc * n_steps > MAX_CELL_OPS:
        raise ValueError(f"{n_mc} samples x {n_steps} cells exceeds the budget of {MAX_CELL_OPS} cell operations")


def _shift_increments(h: CameronMartinPath | None, grid: TimeGrid, d: int) -> np.ndarray:
    if h is None:
        return np.zeros((grid.n_steps, d))
    if h.dim != d:
        raise GridError(f"shift has dimension {h.dim}, driver {d}")
    return h.refine(grid).increments


def _drive(vf: VectorFieldSystem, eps: float, a, dw: np.ndarray, dh: np.ndarray, dt: float):
    """Solve along the lift of the polygon with increments ``eps dw + dh``."""
    x1 = eps * dw + dh
    x2 = 0.5 * x1[..., :, None] * x1[..., None, :]
    return davie_steps(vf, a, x1, x2, dt, eps)


@dataclass(frozen=True, eq=False)
class SdeSample:
    grid: TimeGrid
    w: np.ndarray       # (n_mc, N+1, d) Brownian nodes
    y: np.ndarray       # (n_mc, N+1, n) solution nodes
    finite: np.ndarray  # (n_mc,) bool

    @property
    def blowup_fraction(self) -> float:
        return float(1.0 - np.mean(self.finite))


def simulate_sde(vf: VectorFieldSystem, eps: float, a, grid: TimeGrid, seed: int = DEFAULT_SEED,
                 n_mc: int = 1000, h: CameronMartinPath | None = None, workers: int = 1) -> SdeSample:
    """Paired Brownian drivers and Stratonovich solutions, shifted by ``h`` if given."""
    _check_budget(n_mc, grid.n_steps)
    a = np.asarray(a, dtype=float).reshape(vf.n)
    dh = _shift_increments(h, grid, vf.d)

    def task(idx, size):
        dw = stream(seed, 4, idx).standard_normal((size, grid.n_steps, vf.d)) * math.sqrt(grid.dt)
        y, ok = _drive(vf, eps, a, dw, dh, grid.dt)
        w = np.concatenate([np.zeros((size, 1, vf.d)), np.cumsum(dw, axis=1)], axis=1)
        return w, y, ok

    parts = map_chunks(task, n_mc, workers=workers)
    w = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    ok = np.concatenate([p[2] for p in parts])
    if not ok.all():
        log.warning("simulate_sde: %d of %d samples blew up", int((~ok).sum()), ok.size)
    return SdeSample(grid, w, y, ok)


# --- events ------------------------------------------------------------------


class Event:
    """Predicate on batches of driver node values ``(B, N+1, d)``."""

    event_id = "event"

    def __call__(self, driver: np.ndarray, grid: TimeGrid) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"event_id": self.event_id}


class Everything(Event):
    event_id = "everything"

    def __call__(self, driver, grid):
        return np.ones(driver.shape[0], dtype=bool)


@dataclass(frozen=True, eq=False)
class BesovBall(Event):
    """Translated ball ``T_h(B_R)`` around the lift of ``center``.

    The driver ``x`` belongs to it when the lift of ``x - center`` has
    ``||X^1||_{alpha,4m} < R`` and ``||X^2||_{2 alpha,2m} < R^2``.
    """

    center: CameronMartinPath | None
    radius: float
    params: BesovParams
    event_id: str = "ball"

    def norms(self, driver: np.ndarray, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
        x = driver
        if self.center is not None:
            x = x - self.center.refine(grid).values
        dx = np.diff(x, axis=-2)
        p1, p2 = _prefix(dx, 0.5 * dx[..., :, None] * dx[..., None, :])
        a1, m1 = self.params.level1
        a2, m2 = self.params.level2
        return (
            besov_from_prefix(p1, p2, grid.n_steps, 1, a1, m1),
            besov_from_prefix(p1, p2, grid.n_steps, 2, a2, m2),
        )

    def __call__(self, driver, grid):
        n1, n2 = self.norms(driver, grid)
        return (n1 < self.radius) & (n2 < self.radius**2)

    def describe(self):
        return {
            "event_id": self.event_id, "kind": "besov_ball", "radius": self.radius,
            "alpha": self.params.alpha, "m": self.params.m,
            "center_energy": None if self.center is None else self.center.energy,
        }


@dataclass(frozen=True, eq=False)
class Complement(Event):
    inner: Event
    event_id: str = "complement"

    def __call__(self, driver, grid):
        return ~self.inner(driver, grid)

    def describe(self):
        return {"event_id": self.event_id, "complement_of": self.inner.describe()}


# --- pinned weights ----------------------------------------------------------


def _pinned_moments(vf, eps, a, kernel, events, n_mc, seed, n_steps, shift, workers, key=()):
    """Per-event moments of ``1_A(driver) psi(y_1) weight``, chunk-reduced.

    The driver increments are ``eps dw + dh``; the weight is the Gaussian
    likelihood ratio of the Brownian increments to this proposal.
    """
    _check_budget(n_mc, n_steps)
    grid = TimeGrid(n_steps)
    a = np.asarray(a, dtype=float).reshape(vf.n)
    mu = _shift_increments(shift, grid, vf.d) / eps

    def task(idx, size):
        rng = stream(seed, 5, *key, idx)
        dw = rng.standard_normal((size, n_steps, vf.d)) * math.sqrt(grid.dt)
        driver, base, ok = _weighted_kernel(vf, eps, a, kernel, dw, mu, grid, shift is not None)
        out = []
        for ev in events:
            v = np.where(ev(driver, grid), base, 0.0)[ok]
            out.append(_Moments.of(v))
        return out, int((~ok).sum())

    parts = map_chunks(task, n_mc, workers=workers)
    moments = [_combine(p[0][i] for p in parts) for i in range(len(events))]
    blown = sum(p[1] for p in parts)
    return moments, blown


def _driver_nodes(eps: float, inc: np.ndarray) -> np.ndarray:
    zero = np.zeros(inc.shape[:-2] + (1, inc.shape[-1]))
    return eps * np.concatenate([zero, np.cumsum(inc, axis=-2)], axis=-2)


def _weighted_kernel(vf, eps, a, kernel, dw, mu, grid, shifted):
    """Driver nodes, ``psi(y_1)`` times the likelihood ratio, and the finite mask."""
    inc = dw + mu
    y, ok = _drive(vf, eps, a, inc, np.zeros_like(mu), grid.dt)
    log_w = np.sum(dw * dw - inc * inc, axis=(-2, -1)) / (2 * grid.dt) if shifted else 0.0
    base = np.where(ok, np.exp(kernel.log(np.where(ok[:, None], y[:, -1], 0.0)) + log_w), 0.0)
    return _driver_nodes(eps, inc), base, ok


# --- subset simulation for small balls ------------------------------------------------


SUBSET_P0 = 0.1
SUBSET_REPLICATES = 10
SUBSET_MAX_LEVELS = 200


class _SubsetRun(NamedTuple):
    value: float
    levels: int
    hits: int
    g_sum: float
    g_sq: float
    blown: int
    capped: bool


def _ball_score(ball: "BesovBall", driver: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """``max(||X^1||, ||X^2||^{1/2}) / R``; the ball is ``score < 1``."""
    n1, n2 = ball.norms(driver, grid)
    return np.maximum(n1, np.sqrt(n2)) / ball.radius


def _subset_run(vf, eps, a, kernel, ball, mu, grid, rng, size, p0) -> _SubsetRun:
    sq = math.sqrt(grid.dt)

    def score(z):
        return _ball_score(ball, _driver_nodes(eps, z * sq + mu), grid)

    z = rng.standard_normal((size, grid.n_steps, vf.d))
    s = score(z)
    n_seed = max(int(p0 * size), 1)
    chain = size // n_seed
    beta = 0.5
    log_p = 0.0
    levels = 0
    capped = False
    while np.mean(s < 1.0) < p0:
        if levels == SUBSET_MAX_LEVELS:
            capped = True
            break
        order = np.argsort(s, kind="stable")
        thr = 0.5 * (s[order[n_seed - 1]] + s[order[n_seed]])
        log_p += math.log(n_seed / size)
        cur, s_cur = z[order[:n_seed]], s[order[:n_seed]]
        zs, ss, accepted = [], [], 0
        for _ in range(chain):
            # pCN keeps N(0, I) invariant, so accepting inside the level is exact
            prop = math.sqrt(1 - beta**2) * cur + beta * rng.standard_normal(cur.shape)
            s_prop = score(prop)
            take = s_prop < thr
            accepted += int(take.sum())
            cur = np.where(take[:, None, None], prop, cur)
            s_cur = np.where(take, s_prop, s_cur)
            zs.append(cur)
            ss.append(s_cur)
        z, s = np.concatenate(zs), np.concatenate(ss)
        rate = accepted / (chain * n_seed)
        beta = min(1.0, beta * 1.3) if rate > 0.5 else (beta * 0.7 if rate < 0.2 else beta)
        levels += 1
    hit = s < 1.0
    if not hit.any():
        return _SubsetRun(0.0, levels, 0, 0.0, 0.0, 0, capped)
    _, g, ok = _weighted_kernel(vf, eps, a, kernel, z[hit] * sq, mu, grid, True)
    g = g[ok]
    value = math.exp(log_p) * float(np.sum(g)) / s.size
    return _SubsetRun(value, levels, int(hit.sum()), float(g.sum()), float(np.sum(g * g)),
                      int((~ok).sum()), capped)


def estimate_ball_subset(vf: VectorFieldSystem, eps: float, ball: "BesovBall", kernel: MollifierKernel,
                         n_mc: int, seed: int = DEFAULT_SEED, *, a, n_steps: int = 32,
                         shift: CameronMartinPath | None = None, p0: float = SUBSET_P0,
                         replicates: int = SUBSET_REPLICATES, workers: int = 1, key=()) -> Estimate:
    """``E[1_ball(eps W + h) psi(y_1) weight]`` by subset simulation.

    The ball indicator is reached through nested levels of the ball score,
    each holding a fraction ``p0`` of the previous one, with pCN moves inside
    each level. The shift ``h`` is a Cameron-Martin change of measure as in
    ``estimate_pinned_functional``. The estimate averages ``replicates``
    independent runs of ``n_mc / replicates`` samples per level; the
    standard error is their spread. When the ball holds at least ``p0`` of
    the samples no levels are added and the run is plain importance sampling.
    """
    if not 0 < p0 < 1:
        raise ValueError(f"p0 must lie in (0, 1), got {p0}")
    size = n_mc // replicates
    if replicates < 2 or size * p0 < 1:
        raise ValueError("need at least two replicates and one seed per level")
    _check_budget(n_mc, n_steps)
    grid = TimeGrid(n_steps)
    a = np.asarray(a, dtype=float).reshape(vf.n)
    mu = _shift_increments(shift, grid, vf.d) / eps

    def task(idx, _size):
        return _subset_run(vf, eps, a, kernel, ball, mu, grid, stream(seed, 8, *key, idx), size, p0)

    runs = map_chunks(task, replicates, workers=workers, chunk=1)
    values = np.array([r.value for r in runs])
    g_sum = sum(r.g_sum for r in runs)
    g_sq = sum(r.g_sq for r in runs)
    hits = sum(r.hits for r in runs)
    blown = sum(r.blown for r in runs)
    log.info("estimate_ball_subset: eps=%g levels=%s", eps, [r.levels for r in runs])
    flags = []
    if blown:
        flags.append(f"blowup:{blown}")
    if any(r.capped for r in runs):
        flags.append("subset-level-cap")
    ess = g_sum**2 / g_sq if g_sq > 0 else 0.0
    if hits == 0:
        flags.append("zero-hits")
    elif ess < MIN_ESS:
        flags.append(f"low-ess:{ess:.1f}")
    se = float(values.std(ddof=1)) / math.sqrt(replicates)
    return Estimate(float(values.mean()), se, ess, size * replicates, hits, tuple(flags))


def estimate_heat_kernel(vf: VectorFieldSystem, eps: float, a, a_prime, kernel: MollifierKernel | None = None,
                         n_mc: int = 100_000, seed: int = DEFAULT_SEED, n_steps: int = 32,
                         workers: int = 1, shift: CameronMartinPath | None = None,
                         c_eta: float = 0.25) -> Estimate:
    """Mollified endpoint density ``E[psi_eta(y_1)]`` at ``a'``.

    The standard error is the sample standard deviation over ``sqrt(n)``.
    """
    vf.require_elliptic(a)
    kernel = kernel or MollifierKernel.for_eps(eps, a_prime, c_eta)
    if not np.allclose(kernel.center, np.asarray(a_prime, dtype=float)):
        raise ValueError("kernel is not centred at a'")
    (m,), blown = _pinned_moments(vf, eps, a, kernel, [Everything()], n_mc, seed, n_steps, shift, workers)
    return _finish(m, [f"blowup:{blown}"] if blown else [])


def estimate_pinned_functional(vf: VectorFieldSystem, eps: float, event: Event, kernel: MollifierKernel,
                               n_mc: int, seed: int = DEFAULT_SEED, *, a, n_steps: int = 32,
                               shift: CameronMartinPath | None = None, normalize: bool = False,
                               workers: int = 1) -> Estimate:
    """``E[1_event(eps W) psi_eta(y_1)]``, or its ratio to the whole-space weight.

    The normalised estimate uses the same samples for numerator and
    denominator; its standard error comes from the delta method.
    """
    events = [event, Everything()] if normalize else [event]
    ms, blown = _pinned_moments(vf, eps, a, kernel, events, n_mc, seed, n_steps, shift, workers)
    flags = [f"blowup:{blown}"] if blown else []
    est = _finish(ms[0], flags)
    if not normalize:
        return est
    whole = _finish(ms[1], flags)
    if not whole.value > 0:
        return Estimate(math.nan, math.nan, 0.0, est.n, est.hits, tuple(flags + ["zero-normaliser"]))
    ratio = est.value / whole.value
    # delta method: the residuals v (1_A - ratio) have mean zero by construction
    n = ms[0].n
    var = (ms[0].total_sq * (1 - ratio) ** 2 + (ms[1].total_sq - ms[0].total_sq) * ratio**2) / n
    se = math.sqrt(max(var, 0.0) / n) / whole.value
    return Estimate(ratio, se, est.ess, est.n, est.hits, est.flags)


# --- Malliavin covariance along sample paths -----------------------------------


class MalliavinSample(NamedTuple):
    tau: np.ndarray      # (B, n, n)
    scaled: np.ndarray   # tau / eps^2
    singular: np.ndarray  # (B,) bool


def pathwise_malliavin_cov(vf: VectorFieldSystem, eps: float, h: CameronMartinPath, w, a) -> MalliavinSample:
    """``eps^2 J_1 int J^{-1} sigma sigma^T J^{-T} ds J_1^T`` for the shifted flow.

    Args:
        h: Shift on the driver grid.
        w: Brownian node values ``(B, N+1, d)`` or a ``SampledPath``.
    """
    if isinstance(w, SampledPath):
        grid, vals = w.grid, w.values[None]
    else:
        vals = np.asarray(w, dtype=float)
        grid = TimeGrid(vals.shape[-2] - 1)
    dh = _shift_increments(h, grid, vf.d)
    du = eps * np.diff(vals, axis=-2) + dh
    fp = integrate_flow(vf, np.asarray(a, dtype=float).reshape(vf.n), du, grid.dt, eps=eps)
    G = pulled_back_sigma(vf, fp.phi, fp.Minv)
    with np.errstate(all="ignore"):
        tau = eps**2 * covariance_quadrature(G, fp.M[..., -1, :, :], grid.dt)
        det = np.linalg.det(fp.M[..., -1, :, :])
    singular = ~fp.finite | ~np.isfinite(det) | (np.abs(det) < 1e-300)
    if singular.any():
        log.warning("pathwise_malliavin_cov: %d singular Jacobians", int(singular.sum()))
    return MalliavinSample(tau, tau / eps**2, singular)


# --- Gaussian decay of Brownian rough path norms -------------------------------


@dataclass(frozen=True)
class DecayFit:
    level: int
    radii: np.ndarray
    probs: np.ndarray
    hits: np.ndarray
    slope: float
    intercept: float
    used: np.ndarray
    flags: tuple


@dataclass(frozen=True)
class BallDecayTable:
    params: BesovParams
    scale: float
    fits: tuple

    def fit(self, level: int) -> DecayFit:
        return self.fits[level - 1]


def brownian_rough_norms(params: BesovParams, n_mc: int, seed: int = DEFAULT_SEED, n_steps: int = 128,
                         d: int = 1, scale: float = 1.0, workers: int = 1):
    """``||X^1||_{alpha,4m}`` and ``||X^2||^{1/2}_{2 alpha,2m}`` for the lift of ``scale W``."""
    grid = TimeGrid(n_steps)
    a1, m1 = params.level1
    a2, m2 = params.level2

    def task(idx, size):
        dw = scale * stream(seed, 6, idx).standard_normal((size, n_steps, d)) * math.sqrt(grid.dt)
        p1, p2 = _prefix(dw, 0.5 * dw[..., :, None] * dw[..., None, :])
        return (
            besov_from_prefix(p1, p2, n_steps, 1, a1, m1),
            np.sqrt(besov_from_prefix(p1, p2, n_steps, 2, a2, m2)),
        )

    parts = map_chunks(task, n_mc, workers=workers, chunk=1024)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _tail_fit(norms: np.ndarray, radii, level: int, min_hits: int) -> DecayFit:
    if radii is None:
        med = float(np.median(norms))
        iqr = float(np.subtract(*np.percentile(norms, [75, 25])))
        radii = np.sqrt(np.linspace(med**2, (med + 3 * iqr) ** 2, 12))
    radii = np.asarray(radii, dtype=float)
    srt = np.sort(norms)
    hits = norms.size - np.searchsorted(srt, radii, side="left")
    probs = hits / norms.size
    used = hits >= min_hits
    flags = []
    if (~used).any():
        flags.append(f"insufficient-tail-hits:{int((~used).sum())}")
    if used.sum() >= 2:
        slope, intercept = np.polyfit(radii[used] ** 2, np.log(probs[used]), 1)
    else:
        slope = intercept = math.nan
        flags.append("no-fit")
    return DecayFit(level, radii, probs, hits, float(slope), float(intercept), used, tuple(flags))


def ball_decay_probe(params: BesovParams, radii=None, n_mc: int = 20_000, seed: int = DEFAULT_SEED,
                     n_steps: int = 128, d: int = 1, scale: float = 1.0, min_hits: int = 10,
                     workers: int = 1) -> BallDecayTable:
    """Tail probabilities ``P(||(scale W)^i||^{1/i} >= R)`` and their ``log P`` vs ``R^2`` fit.

    Without ``radii`` the ladder spans ``R^2`` from the median squared to
    ``(median + 3 IQR)^2`` of each level's sample.
    """
    n1, n2 = brownian_rough_norms(params, n_mc, seed, n_steps, d, scale, workers)
    fits = tuple(_tail_fit(v, radii, lvl, min_hits) for lvl, v in ((1, n1), (2, n2)))
    return BallDecayTable(params, scale, fits)


# --- epsilon sweep -------------------------------------------------------------


@dataclass(frozen=True)
class EventSpec:
    """Event for a sweep.

    ``kind`` is ``"everything"`` or ``"ball"``; ``center`` is ``"hstar"``
    (the minimiser), ``"high"`` (a feasible path of larger energy) or an
    explicit ``CameronMartinPath``.
    """

    event_id: str
    kind: str = "everything"
    radius: float = math.inf
    center: object = "hstar"


@dataclass(frozen=True)
class LdpSweepConfig:
    eps_ladder: tuple = (0.5, 0.35, 0.25, 0.175, 0.125)
    events: tuple = (EventSpec("everything"),)
    n_mc: int = 100_000
    c_eta: float = 0.25
    params: BesovParams = BesovParams(0.42, 4)
    n_steps: int = 32
    importance: bool = True
    seed: int = DEFAULT_SEED
    workers: int = 1

    def __post_init__(self):
        ladder = tuple(float(e) for e in self.eps_ladder)
        if any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError("eps ladder must be positive and strictly decreasing")
        object.__setattr__(self, "eps_ladder", ladder)
        if not self.c_eta > 0:
            raise ValueError("c_eta must be positive")
        ids = [e.event_id for e in self.events]
        if len(set(ids)) != len(ids):
            raise ValueError(f"event ids must be unique: {ids}")

    def bandwidth(self, eps: float) -> float:
        return self.c_eta * eps

    def echo(self) -> dict:
        return {
            "eps_ladder": list(self.eps_ladder), "n_mc": self.n_mc, "c_eta": self.c_eta,
            "alpha": self.params.alpha, "m": self.params.m, "n_steps": self.n_steps,
            "importance": self.importance, "seed": self.seed,
            "events": [
                {"event_id": e.event_id, "kind": e.kind, "radius": e.radius,
                 "center": e.center if isinstance(e.center, str) else "explicit"}
                for e in self.events
            ],
        }


@dataclass(frozen=True)
class SweepRow:
    eps: float
    event_id: str
    estimate: float
    stderr: float
    ess: float
    eps2_log: float
    target_rate: float
    flags: tuple = ()


@dataclass(frozen=True)
class LdpResult:
    rows: tuple
    fits: dict
    config: LdpSweepConfig
    n_dim: int
    notes: tuple = field(default=(MOLLIFIER_NOTE,))

    def series(self, event_id: str):
        rows = [r for r in self.rows if r.event_id == event_id]
        return np.array([r.eps for r in rows]), np.array([r.eps2_log for r in rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eps", "event_id", "estimate", "stderr", "ess", "eps2_log", "target_rate"])
        for r in self.rows:
            w.writerow([r.eps, r.event_id, f"{r.estimate:.10e}", f"{r.stderr:.10e}",
                        f"{r.ess:.4f}", f"{r.eps2_log:.10f}", f"{r.target_rate:.10f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"config": self.config.echo(), "fits": self.fits, "notes": list(self.notes)}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def high_energy_path(grid: TimeGrid, endpoint: float = 1.0, energy: float = 2.0) -> CameronMartinPath:
    """``g(t) = endpoint t + c sin(pi t)`` with ``c`` chosen for the requested energy (1-D)."""
    base = 0.5 * endpoint**2
    if energy < base:
        raise ValueError(f"energy {energy} is below the straight-line energy {base}")
    c = math.sqrt(4 * (energy - base)) / math.pi
    t = grid.times
    return CameronMartinPath.from_path(SampledPath(grid, (endpoint * t + c * np.sin(np.pi * t))[:, None]))


def fit_rate(eps, est, n_dim: int) -> dict:
    """Rate regression of ``eps^2 log mu`` over an ``eps`` ladder.

    ``fitted_rate`` is the least-squares fit of ``eps^2 log mu`` to a
    constant. ``slope_smallest`` is the secant slope in ``eps^2`` between the
    two smallest ``eps``. ``intercept`` extrapolates the linear fit of
    ``eps^2 (log mu + n log eps)`` on ``eps^2`` to ``eps = 0``; the
    ``n log eps`` term removes the ``eps^-n`` density prefactor. Zero
    estimates are excluded and listed.
    """
    eps = np.asarray(eps, dtype=float)
    est = np.asarray(est, dtype=float)
    keep = est > 0
    out = {"excluded_eps": eps[~keep].tolist(), "fitted_rate": math.nan,
           "slope_smallest": math.nan, "intercept": math.nan, "slope": math.nan}
    if not keep.any():
        return out
    e = eps[keep]
    raw = e**2 * np.log(est[keep])
    out["fitted_rate"] = float(raw.mean())
    if keep.sum() < 2:
        return out
    order = np.argsort(e)
    e2 = e[order] ** 2
    out["slope_smallest"] = float((raw[order][1] - raw[order][0]) / (e2[1] - e2[0]))
    yv = e**2 * (np.log(est[keep]) + n_dim * np.log(e))
    slope, intercept = np.polyfit(e**2, yv, 1)
    out.update(intercept=float(intercept), slope=float(slope))
    return out


def ball_anchor(center: CameronMartinPath, hstar: CameronMartinPath, radius: float,
                params: BesovParams, grid: TimeGrid, margin: float = 0.99) -> CameronMartinPath:
    """Lowest-energy point of the segment from ``center`` towards ``hstar`` inside the ball.

    Shifting by this point rather than the centre puts the proposal where the
    ball's weight concentrates as ``eps -> 0``.
    """
    direction = (hstar.refine(grid) - center.refine(grid))
    if direction.sq_norm == 0.0:
        return center.refine(grid)
    probe = BesovBall(None, radius, params)
    n1, n2 = probe.norms(direction.values[None], grid)
    s = min(1.0, radius / float(n1[0]), radius / math.sqrt(float(n2[0])) if n2[0] > 0 else math.inf)
    return center.refine(grid) + direction.scale(margin * s)


def ldp_sweep(cfg: LdpSweepConfig, problem: ActionProblem, rate: RateResult | None = None) -> LdpResult:
    """Pinned weights of each event along the ``eps`` ladder and their fitted rates.

    With importance sampling the driver is shifted by ``h*`` for the whole
    space and by ``ball_anchor`` for balls, and ball events are estimated by
    subset simulation so that small balls are reached. Without importance
    sampling every event is plain Monte Carlo on shared samples.
    """
    vf = problem.vf
    rate = rate or minimize_action(problem)
    grid = TimeGrid(cfg.n_steps)
    hstar = rate.h

    def resolve(spec: EventSpec):
        if isinstance(spec.center, CameronMartinPath):
            center = spec.center
        elif spec.center == "hstar":
            center = hstar
        elif spec.center == "high":
            if vf.n != 1 or vf.d != 1:
                raise ValueError("the built-in high-energy centre is one-dimensional")
            center = high_energy_path(grid, float(problem.a_prime[0] - problem.a[0]))
        else:
            raise ValueError(f"unknown centre {spec.center!r}")
        if spec.kind == "everything":
            return Everything(), hstar.refine(grid), -rate.value
        if spec.kind == "ball":
            target = -rate_I(lift_piecewise_linear(center.as_path()), problem)
            anchor = ball_anchor(center, hstar, spec.radius, cfg.params, grid)
            return BesovBall(center, spec.radius, cfg.params, spec.event_id), anchor, target
        raise ValueError(f"unknown event kind {spec.kind!r}")

    resolved = [resolve(s) for s in cfg.events]
    rows = []
    for i, eps in enumerate(cfg.eps_ladder):
        kernel = MollifierKernel(cfg.bandwidth(eps), problem.a_prime)
        results = {}
        groups: dict = {}
        for j, (event, anchor, _) in enumerate(resolved):
            if cfg.importance and isinstance(event, BesovBall):
                results[j] = estimate_ball_subset(
                    vf, eps, event, kernel, cfg.n_mc, cfg.seed, a=problem.a, n_steps=cfg.n_steps,
                    shift=anchor, workers=cfg.workers, key=(i, j),
                )
            else:
                groups.setdefault(anchor.derivative.tobytes() if cfg.importance else None, []).append(j)
        for members in groups.values():
            shift = resolved[members[0]][1] if cfg.importance else None
            ms, blown = _pinned_moments(
                vf, eps, problem.a, kernel, [resolved[j][0] for j in members],
                cfg.n_mc, cfg.seed, cfg.n_steps, shift, cfg.workers, key=(i,),
            )
            for j, m in zip(members, ms):
                results[j] = _finish(m, [f"blowup:{blown}"] if blown else [])
        for j, spec in enumerate(cfg.events):
            est = results[j]
            e2l = eps**2 * math.log(est.value) if est.value > 0 else math.nan
            rows.append(SweepRow(eps, spec.event_id, est.value, est.stderr, est.ess, e2l, resolved[j][2], est.flags))
    fits = {}
    for j, spec in enumerate(cfg.events):
        mine = [r for r in rows if r.event_id == spec.event_id]
        fit = fit_rate([r.eps for r in mine], [r.estimate for r in mine], vf.n)
        fit.update(
            target_rate=resolved[j][2],
            eps2_log_smallest=mine[-1].eps2_log,
            shift_energy=resolved[j][1].energy if cfg.importance else 0.0,
        )
        fits[spec.event_id] = fit
    return LdpResult(tuple(rows), fits, cfg, vf.n)
