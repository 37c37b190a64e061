"""Minimal-energy controls for the endpoint-constrained skeleton equation.

Controls are piecewise constant on a control grid; the skeleton is solved on
a solver grid that refines it. The constraint ``phi0(h)_1 = a'`` is handled
by an augmented Lagrangian with L-BFGS-B inner solves, and the gradient of
``lam . phi0(h)_1`` comes from the adjoint form ``G_s^T M_1^T lam``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math

import numpy as np
from scipy.optimize import minimize

from .flow import (
    BlowUpError,
    VectorFieldSystem,
    adjoint_control,
    skeleton_endpoint,
    solve_skeleton,
)
from .rng import DEFAULT_SEED, map_chunks, stream
from .rough_core import (
    CameronMartinPath,
    GridError,
    Level2RoughPath,
    SampledPath,
    TimeGrid,
    common_grid,
)

log = logging.getLogger(__name__)

# an outer iteration must shrink the constraint by this factor or mu grows
_PROGRESS = 0.25
_MU_MAX = 1e12
# stationarity target in the control L^2 norm
_STAT_TOL = 1e-9


class H0ViolationError(RuntimeError):
    """No control reaches the target endpoint: the constraint set looks empty."""


class OptimizerStallError(RuntimeError):
    """The iteration budget ran out before a feasible point was reached."""


@dataclass(frozen=True, eq=False)
class ActionProblem:
    """Endpoint-constrained energy minimisation for one system.

    Args:
        vf: The vector field system.
        a: Start point.
        a_prime: Target endpoint.
        n_controls: Cells of the control grid.
        solver_steps: Cells of the solver grid, a multiple of ``n_controls``.
            Defaults to ``2 * n_controls``.
        tol_feas: Feasibility tolerance; defaults to ``1e-6 (1 + |a'|)``.
        n_starts: Multistart count; start 0 is the zero control.
        start_scale: Standard deviation of random start controls.
        value_tol: Minima within this of the best are all reported.
    """

    vf: VectorFieldSystem
    a: np.ndarray
    a_prime: np.ndarray
    n_controls: int = 32
    solver_steps: int | None = None
    tol_feas: float | None = None
    mu0: float = 10.0
    mu_growth: float = 10.0
    max_outer: int = 40
    max_inner: int = 2000
    n_starts: int = 4
    start_scale: float = 1.0
    value_tol: float = 1e-4
    seed: int = DEFAULT_SEED
    workers: int = 1

    def __post_init__(self):
        n = self.vf.n
        a = np.asarray(self.a, dtype=float).reshape(-1)
        ap = np.asarray(self.a_prime, dtype=float).reshape(-1)
        if a.shape != (n,) or ap.shape != (n,):
            raise ValueError(f"endpoints must have dimension {n}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "a_prime", ap)
        if self.n_controls < 1:
            raise ValueError("n_controls must be positive")
        steps = 2 * self.n_controls if self.solver_steps is None else int(self.solver_steps)
        if steps % self.n_controls:
            raise GridError(f"control grid ({self.n_controls}) must divide solver grid ({steps})")
        object.__setattr__(self, "solver_steps", steps)
        tol = 1e-6 * (1 + float(np.linalg.norm(ap))) if self.tol_feas is None else float(self.tol_feas)
        if not tol > 0:
            raise ValueError("tol_feas must be positive")
        object.__setattr__(self, "tol_feas", tol)
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")

    @property
    def control_grid(self) -> TimeGrid:
        return TimeGrid(self.n_controls)

    @property
    def solver_grid(self) -> TimeGrid:
        return TimeGrid(self.solver_steps)

    @property
    def refine(self) -> int:
        return self.solver_steps // self.n_controls

    def control_path(self, u) -> CameronMartinPath:
        return CameronMartinPath(self.control_grid, np.asarray(u, dtype=float).reshape(self.n_controls, self.vf.d))


@dataclass(frozen=True, eq=False)
class LocalMinimum:
    value: float
    residual: float
    start_index: int
    h: CameronMartinPath


@dataclass(frozen=True, eq=False)
class RateResult:
    """Best feasible control and every other minimum close to it in value."""

    h: CameronMartinPath
    value: float
    residual: float
    minima: tuple
    start_index: int
    seed: int
    trace: tuple = field(default=())
    multiplier: np.ndarray | None = None

    def shifted_value(self, value: float) -> float:
        """``I - min I``: zero at the reported global minimum."""
        return value - self.value

    @property
    def shifted_values(self) -> list[float]:
        return [self.shifted_value(m.value) for m in self.minima]

    def to_json(self) -> str:
        return json.dumps(
            {
                "value": self.value,
                "residual": self.residual,
                "control": self.h.derivative.ravel().tolist(),
                "n_controls": self.h.grid.n_steps,
                "seed": self.seed,
                "start_index": self.start_index,
                "minima": [
                    {"value": m.value, "shifted_value": self.shifted_value(m.value),
                     "residual": m.residual, "start_index": m.start_index}
                    for m in self.minima
                ],
            },
            indent=2,
        )


@dataclass
class _Outcome:
    x: np.ndarray
    c: np.ndarray
    lam: np.ndarray
    trace: list
    status: str
    start_index: int = 0


def _projected_residual(x, vjp, m, weight) -> float:
    basis = np.stack([vjp(e) for e in np.eye(m)], axis=1) / weight
    nu, *_ = np.linalg.lstsq(basis, x, rcond=None)
    return float(np.linalg.norm(x - basis @ nu) * math.sqrt(weight))


def _augmented_lagrangian(x0, evaluate, weight, target, max_outer, max_inner, mu0, growth):
    """Minimise ``weight |x|^2 / 2`` subject to ``c(x) = 0``.

    ``evaluate(x)`` returns ``(c, vjp)`` with ``vjp(v) = grad_x (v . c)``.
    ``trace`` holds ``(|c|, stationarity)`` after every outer iteration, the
    stationarity being the ``L^2`` distance from ``x`` to the span of the
    constraint gradients.
    """
    x = np.array(x0, dtype=float)
    c, _ = evaluate(x)
    lam = np.zeros_like(c)
    mu = mu0
    trace = []
    prev = np.linalg.norm(c)
    best = None

    for _ in range(max_outer):
        def fun(x, lam=lam, mu=mu):
            c, vjp = evaluate(x)
            val = 0.5 * weight * x @ x - lam @ c + 0.5 * mu * c @ c
            return val, weight * x + vjp(mu * c - lam)

        res = minimize(fun, x, jac=True, method="L-BFGS-B",
                       options={"maxiter": max_inner, "gtol": 1e-13, "ftol": 1e-16, "maxcor": 20})
        x = res.x
        c, vjp = evaluate(x)
        lam = lam - mu * c
        cn = float(np.linalg.norm(c))
        stat = _projected_residual(x, vjp, c.size, weight)
        trace.append((cn, stat))
        if cn <= target:
            if best is None or stat < best.trace[-1][1]:
                best = _Outcome(x.copy(), c, lam.copy(), list(trace), "converged")
            if stat <= _STAT_TOL:
                return best
        elif cn > _PROGRESS * prev:
            mu = min(mu * growth, _MU_MAX)
        prev = cn
    if best is not None:
        return best
    c, vjp = evaluate(x)
    g = vjp(c)
    infeasible_stationary = np.linalg.norm(g) <= 1e-10 * (1.0 + np.linalg.norm(c))
    return _Outcome(x, c, lam, trace, "infeasible" if infeasible_stationary else "budget")


def _endpoint_evaluator(p: ActionProblem):
    sgrid = p.solver_grid
    nc, r, d = p.n_controls, p.refine, p.vf.d
    dt = sgrid.dt

    def evaluate(x):
        h = p.control_path(x).refine(sgrid)
        sk = solve_skeleton(p.vf, h, p.a)
        c = sk.endpoint - p.a_prime

        def vjp(v):
            return (adjoint_control(sk, v).reshape(nc, r, d).sum(axis=1) * dt).ravel()

        return c, vjp

    return evaluate


def _solve_from(p: ActionProblem, index: int, x0) -> _Outcome:
    evaluate = _endpoint_evaluator(p)
    try:
        out = _augmented_lagrangian(
            x0, evaluate, 1.0 / p.n_controls, 1e-3 * p.tol_feas,
            p.max_outer, p.max_inner, p.mu0, p.mu_growth,
        )
    except BlowUpError as exc:
        log.info("start %d abandoned: %s", index, exc)
        return _Outcome(np.asarray(x0, float), np.full(p.vf.n, np.inf), np.zeros(p.vf.n), [], "blowup", index)
    out.start_index = index
    return out


def _start_controls(p: ActionProblem) -> list[np.ndarray]:
    size = p.n_controls * p.vf.d
    starts = [np.zeros(size)]
    for i in range(1, p.n_starts):
        starts.append(p.start_scale * stream(p.seed, 3, i).standard_normal(size))
    return starts


def minimize_action(p: ActionProblem) -> RateResult:
    """Minimise ``||h||_H^2 / 2`` over controls with ``phi0(h)_1 = a'``.

    Raises:
        H0ViolationError: every start ended at an infeasible stationary point
            of ``|phi0(h)_1 - a'|^2``.
        OptimizerStallError: no start became feasible within the budget.
    """
    starts = _start_controls(p)
    outcomes = map_chunks(lambda i, _: _solve_from(p, i, starts[i]), p.n_starts, workers=p.workers, chunk=1)
    feasible = [o for o in outcomes if np.linalg.norm(o.c) <= p.tol_feas]
    if not feasible:
        gaps = [float(np.linalg.norm(o.c)) for o in outcomes]
        if all(o.status in ("infeasible", "blowup") for o in outcomes):
            raise H0ViolationError(
                f"{p.vf.name}: endpoint {p.a_prime.tolist()} not reached from {p.a.tolist()}; "
                f"endpoint gaps {gaps} are stationary"
            )
        raise OptimizerStallError(f"{p.vf.name}: no feasible control after {p.max_outer} outer iterations; gaps {gaps}")

    w = 1.0 / p.n_controls
    scored = sorted(
        ((0.5 * w * float(o.x @ o.x), tuple(o.x), o) for o in feasible),
        key=lambda t: (t[0], t[1]),
    )
    best_value = scored[0][0]
    minima = []
    for value, _, o in scored:
        if value > best_value + p.value_tol:
            break
        if any(np.linalg.norm(o.x - m.h.derivative.ravel()) * math.sqrt(w) <= 1e-4 for m in minima):
            continue
        minima.append(LocalMinimum(value, float(np.linalg.norm(o.c)), o.start_index, p.control_path(o.x)))
    best = scored[0][2]
    return RateResult(
        h=p.control_path(best.x),
        value=best_value,
        residual=float(np.linalg.norm(best.c)),
        minima=tuple(minima),
        start_index=best.start_index,
        seed=p.seed,
        trace=tuple(best.trace),
        multiplier=best.lam,
    )


def first_order_residual(result: RateResult, p: ActionProblem) -> float:
    """Distance in ``L^2`` from ``h*'`` to the span of adjoint controls ``G^T M_1^T nu``."""
    if result.residual > p.tol_feas:
        raise ValueError("result is not feasible")
    h = result.h
    if h.grid != p.control_grid:
        raise GridError("result was computed on a different control grid")
    c, vjp = _endpoint_evaluator(p)(h.derivative.ravel())
    return _projected_residual(h.derivative.ravel(), vjp, c.size, 1.0 / p.n_controls)


def _is_lift(X: Level2RoughPath) -> bool:
    x1, x2 = X.first, X.second
    gap = x2 - 0.5 * x1[:, :, None] * x1[:, None, :]
    scale = max(1.0, float(np.max(np.abs(x1))) ** 2)
    return bool(np.max(np.abs(gap), initial=0.0) <= 1e-12 * scale)


def rate_I(X: Level2RoughPath, p: ActionProblem) -> float:
    """``||h||_H^2 / 2`` if ``X`` is the lift of a feasible ``h``, else ``inf``.

    A rough path is a lift of a path on its grid exactly when every cell's
    second level equals half the square of its first level.
    """
    if X.dim != p.vf.d or not _is_lift(X):
        return math.inf
    h = CameronMartinPath(X.grid, X.first / X.grid.dt)
    grid = common_grid(X.grid, p.solver_grid)
    try:
        end = skeleton_endpoint(p.vf, h.refine(grid), p.a)
    except BlowUpError:
        return math.inf
    if np.linalg.norm(end - p.a_prime) > p.tol_feas:
        return math.inf
    return h.energy


@dataclass(frozen=True, eq=False)
class RateJResult:
    """Value of the pinned rate at a path, with how it was obtained.

    The value is an upper bound: the infimum is taken over local minima the
    optimiser found on the discretised control space.
    """

    value: float
    energy: float
    path_residual: float
    status: str
    h: CameronMartinPath | None = None
    note: str = "upper bound from a local minimum of the discretised problem"

    def __float__(self) -> float:
        return float(self.value)


def rate_J(y: SampledPath, p: ActionProblem, base: RateResult | None = None,
           tol_path: float | None = None) -> RateJResult:
    """``inf {||h||^2/2 : phi0(h) = y} - min {||h||^2/2 : phi0(h)_1 = a'}``.

    The path constraint is imposed at the nodes of ``y``'s grid, with controls
    piecewise constant on that grid and the skeleton solved ``p.refine`` times
    finer. ``tol_path`` bounds ``sum_i |phi0(h)_{t_i} - y_{t_i}|^2`` and defaults
    to ``tol_feas^2``.
    """
    vals = y.values
    if vals.shape[1] != p.vf.n:
        raise GridError(f"path has dimension {vals.shape[1]}, system state has {p.vf.n}")
    if np.linalg.norm(vals[0] - p.a) > p.tol_feas:
        return RateJResult(math.inf, math.inf, math.inf, "bad-start")
    if np.linalg.norm(vals[-1] - p.a_prime) > p.tol_feas:
        return RateJResult(math.inf, math.inf, math.inf, "bad-endpoint")
    tol_path = p.tol_feas**2 if tol_path is None else float(tol_path)
    if base is None:
        base = minimize_action(p)

    K, r, d, n = y.grid.n_steps, p.refine, p.vf.d, p.vf.n
    cgrid = y.grid
    sgrid = TimeGrid(K * r)
    dt = sgrid.dt
    target = vals[1:]

    def evaluate(x):
        h = CameronMartinPath(cgrid, x.reshape(K, d)).refine(sgrid)
        sk = solve_skeleton(p.vf, h, p.a)
        c = (sk.phi0[r::r] - target).ravel()
        M_nodes = sk.M[r::r]  # (K, n, n)

        def vjp(v):
            v = v.reshape(K, n)
            pulled = np.einsum("kji,kj->ki", M_nodes, v)
            tail = np.cumsum(pulled[::-1], axis=0)[::-1]  # sum over nodes at or after each cell end
            g = np.einsum("fij,fi->fj", sk.cell_G, np.repeat(tail, r, axis=0))
            return (g.reshape(K, r, d).sum(axis=1) * dt).ravel()

        return c, vjp

    try:
        out = _augmented_lagrangian(
            np.zeros(K * d), evaluate, 1.0 / K, 1e-3 * math.sqrt(tol_path),
            p.max_outer, p.max_inner, p.mu0, p.mu_growth,
        )
    except BlowUpError:
        return RateJResult(math.inf, math.inf, math.inf, "blowup")
    sq = float(out.c @ out.c)
    if sq > tol_path:
        return RateJResult(math.inf, math.inf, sq, "no-matching-control")
    h = CameronMartinPath(cgrid, out.x.reshape(K, d))
    return RateJResult(h.energy - base.value, h.energy, sq, "ok", h)
