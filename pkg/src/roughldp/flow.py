"""Controlled ODE flows: skeleton, Jacobian flow and first variation.

The state equation is ``dy = sigma(y) du + b(eps, y) dt`` with ``sigma`` of
shape ``(n, d)``. Along a piecewise linear driver ``u`` the equation is an
ODE on every cell, integrated together with the Jacobian ``M`` and its
inverse ``N`` by classical RK4:

    dM = A M dt,   dN = -N A dt,   A = sum_k dsigma[:, k, :] u'_k + grad b.

``N`` is carried as its own ODE so that ``M N = Id`` measures integration
error rather than being true by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .rough_core import CameronMartinPath, GridError, Level2RoughPath, SampledPath, TimeGrid

# central-difference step and tolerance for derivative validation
_FD_STEP = 1e-5
_FD_RTOL = 1e-5


class BlowUpError(FloatingPointError):
    """A trajectory left the finite floats."""


class EllipticityError(ValueError):
    """``sigma(a) sigma(a)^T`` is singular at the starting point."""


def _central_diff(fn, x, step=_FD_STEP):
    """Jacobian of ``fn`` at ``x`` stacked on a trailing axis."""
    cols = []
    for k in range(x.shape[-1]):
        e = np.zeros_like(x)
        e[k] = step
        cols.append((fn(x + e) - fn(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class VectorFieldSystem:
    """Diffusion coefficients ``sigma = [V_1 ... V_d]`` and drift ``b(eps, x)``.

    All callbacks accept states with leading batch axes.

    Args:
        n: State dimension.
        d: Driver dimension.
        sigma: ``x (..., n) -> (..., n, d)``.
        drift: ``(eps, x) -> (..., n)``.
        dsigma: ``x -> (..., n, d, n)`` with entry ``[i, j, k] = d sigma_ij / d x_k``.
        ddrift: ``(eps, x) -> (..., n, n)``, the Jacobian of ``b`` in ``x``.
        ddrift_deps: ``(eps, x) -> (..., n)``, the derivative of ``b`` in ``eps``.
        name: Catalog key, informational only.
        validate: Check shapes and derivatives against central differences.
    """

    n: int
    d: int
    sigma: Callable
    drift: Callable
    dsigma: Callable
    ddrift: Callable
    ddrift_deps: Callable
    name: str = "custom"
    params: dict = field(default_factory=dict)
    validate: bool = True

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError(f"dimensions must be positive, got n={self.n}, d={self.d}")
        if self.validate:
            self.derivative_errors(raise_on_fail=True)

    def derivative_errors(self, n_probes: int = 4, seed: int = 0, raise_on_fail: bool = False) -> dict:
        """Largest relative gap between each derivative callback and central differences."""
        rng = np.random.default_rng(seed)
        n, d = self.n, self.d
        worst = {"dsigma": 0.0, "ddrift": 0.0, "ddrift_deps": 0.0}
        for _ in range(n_probes):
            x = rng.standard_normal(n)
            eps = float(rng.uniform(0.0, 1.0))
            shapes = {
                "sigma": (np.shape(self.sigma(x)), (n, d)),
                "drift": (np.shape(self.drift(eps, x)), (n,)),
                "dsigma": (np.shape(self.dsigma(x)), (n, d, n)),
                "ddrift": (np.shape(self.ddrift(eps, x)), (n, n)),
                "ddrift_deps": (np.shape(self.ddrift_deps(eps, x)), (n,)),
            }
            for key, (got, want) in shapes.items():
                if got != want:
                    raise ValueError(f"{self.name}: {key} has shape {got}, expected {want}")
            checks = {
                "dsigma": (self.dsigma(x), _central_diff(self.sigma, x)),
                "ddrift": (self.ddrift(eps, x), _central_diff(lambda y: self.drift(eps, y), x)),
                "ddrift_deps": (
                    self.ddrift_deps(eps, x),
                    (self.drift(eps + _FD_STEP, x) - self.drift(eps - _FD_STEP, x)) / (2 * _FD_STEP),
                ),
            }
            for key, (exact, approx) in checks.items():
                err = np.linalg.norm(np.asarray(exact) - approx) / max(1.0, np.linalg.norm(approx))
                worst[key] = max(worst[key], float(err))
        if raise_on_fail:
            bad = {k: v for k, v in worst.items() if not v <= _FD_RTOL}
            if bad:
                raise ValueError(f"{self.name}: derivative callbacks disagree with finite differences: {bad}")
        return worst

    def ellipticity(self, a) -> float:
        """Smallest eigenvalue of ``sigma(a) sigma(a)^T``."""
        s = np.asarray(self.sigma(np.asarray(a, dtype=float)))
        return float(np.linalg.eigvalsh(s @ s.T)[0])

    def require_elliptic(self, a, tol: float = 1e-10) -> float:
        lam = self.ellipticity(a)
        if not lam > tol:
            raise EllipticityError(
                f"{self.name}: sigma sigma^T is singular at a={np.asarray(a).tolist()} (min eigenvalue {lam:.3g})"
            )
        return lam

    def coefficients(self, eps: float, x, u):
        """Vector field ``sigma(x) u + b(eps, x)`` and its Jacobian in ``x``."""
        u = np.asarray(u, dtype=float)
        f = (self.sigma(x) @ u[..., :, None])[..., 0] + self.drift(eps, x)
        A = (u[..., None, None, :] @ self.dsigma(x))[..., 0, :] + self.ddrift(eps, x)
        return f, A


class FlowPath(NamedTuple):
    phi: np.ndarray   # (..., N+1, n)
    M: np.ndarray     # (..., N+1, n, n)
    Minv: np.ndarray  # (..., N+1, n, n)
    finite: np.ndarray  # (...) bool


def integrate_flow(vf: VectorFieldSystem, a, du: np.ndarray, dt: float, eps: float = 0.0) -> FlowPath:
    """RK4 along the polygonal driver with cell increments ``du`` of shape ``(..., N, d)``.

    Rows that overflow are flagged in ``finite`` and carry NaN afterwards.
    """
    du = np.asarray(du, dtype=float)
    batch = du.shape[:-2]
    n_cells = du.shape[-2]
    n = vf.n
    x = np.broadcast_to(np.asarray(a, dtype=float), batch + (n,)).copy()
    eye = np.broadcast_to(np.eye(n), batch + (n, n))
    M = eye.copy()
    N = eye.copy()
    phi = np.empty(batch + (n_cells + 1, n))
    Ms = np.empty(batch + (n_cells + 1, n, n))
    Ns = np.empty_like(Ms)
    phi[..., 0, :], Ms[..., 0, :, :], Ns[..., 0, :, :] = x, M, N
    h = dt

    def rhs(x, M, N, u):
        f, A = vf.coefficients(eps, x, u)
        return f, A @ M, -N @ A

    with np.errstate(all="ignore"):
        for i in range(n_cells):
            u = du[..., i, :] / dt
            k1 = rhs(x, M, N, u)
            k2 = rhs(x + 0.5 * h * k1[0], M + 0.5 * h * k1[1], N + 0.5 * h * k1[2], u)
            k3 = rhs(x + 0.5 * h * k2[0], M + 0.5 * h * k2[1], N + 0.5 * h * k2[2], u)
            k4 = rhs(x + h * k3[0], M + h * k3[1], N + h * k3[2], u)
            x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            M = M + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            N = N + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            phi[..., i + 1, :], Ms[..., i + 1, :, :], Ns[..., i + 1, :, :] = x, M, N
    finite = (
        np.all(np.isfinite(phi), axis=(-2, -1))
        & np.all(np.isfinite(Ms), axis=(-3, -2, -1))
        & np.all(np.isfinite(Ns), axis=(-3, -2, -1))
    )
    return FlowPath(phi, Ms, Ns, finite)


def pulled_back_sigma(vf: VectorFieldSystem, phi: np.ndarray, Minv: np.ndarray) -> np.ndarray:
    """``M_s^{-1} sigma(phi_s)`` at every node."""
    return Minv @ vf.sigma(phi)


def covariance_quadrature(G: np.ndarray, M1: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoid rule for ``M_1 int G G^T ds M_1^T`` with ``G`` on the nodes."""
    GG = G @ np.swapaxes(G, -1, -2)
    inner = dt * (GG.sum(axis=-3) - 0.5 * (GG[..., 0, :, :] + GG[..., -1, :, :]))
    C = M1 @ inner @ np.swapaxes(M1, -1, -2)
    return 0.5 * (C + np.swapaxes(C, -1, -2))


@dataclass(frozen=True, eq=False)
class SkeletonSolution:
    """Solution of the skeleton ODE driven by a Cameron-Martin path ``h``."""

    grid: TimeGrid
    h: CameronMartinPath
    phi0: np.ndarray
    M: np.ndarray
    Minv: np.ndarray
    cov: np.ndarray
    G: np.ndarray  # M_s^{-1} sigma(phi0_s) on the nodes

    @property
    def endpoint(self) -> np.ndarray:
        return self.phi0[-1]

    @property
    def path(self) -> SampledPath:
        return SampledPath(self.grid, self.phi0)

    @property
    def cell_G(self) -> np.ndarray:
        """Cell averages of ``M^{-1} sigma``, shape ``(N, n, d)``."""
        return 0.5 * (self.G[:-1] + self.G[1:])

    def inverse_defect(self) -> float:
        """``max_t |M_t Minv_t - Id|``, a measure of integration error."""
        return float(np.max(np.abs(self.M @ self.Minv - np.eye(self.M.shape[-1]))))


def _check_driver(vf: VectorFieldSystem, h: CameronMartinPath):
    if h.dim != vf.d:
        raise GridError(f"driver has dimension {h.dim}, system expects {vf.d}")


def solve_skeleton(vf: VectorFieldSystem, h: CameronMartinPath, a) -> SkeletonSolution:
    """Skeleton flow ``d phi = sigma(phi) dh + b(0, phi) dt`` with ``phi_0 = a``.

    Raises:
        BlowUpError: if the state, Jacobian or its inverse stops being finite.
    """
    _check_driver(vf, h)
    a = np.asarray(a, dtype=float).reshape(vf.n)
    fp = integrate_flow(vf, a, h.increments, h.grid.dt, eps=0.0)
    if not fp.finite:
        bad = int(np.argmax(~np.all(np.isfinite(fp.phi), axis=-1)))
        raise BlowUpError(f"{vf.name}: skeleton flow is not finite from node {bad} on")
    G = pulled_back_sigma(vf, fp.phi, fp.Minv)
    cov = covariance_quadrature(G, fp.M[-1], h.grid.dt)
    return SkeletonSolution(h.grid, h, fp.phi, fp.M, fp.Minv, cov, G)


def skeleton_endpoint(vf: VectorFieldSystem, h: CameronMartinPath, a) -> np.ndarray:
    """``phi0(h)_1`` without assembling the covariance."""
    _check_driver(vf, h)
    fp = integrate_flow(vf, np.asarray(a, dtype=float).reshape(vf.n), h.increments, h.grid.dt)
    if not fp.finite:
        raise BlowUpError(f"{vf.name}: skeleton flow is not finite")
    return fp.phi[-1]


def det_malliavin_cov(skeleton: SkeletonSolution) -> np.ndarray:
    """Deterministic Malliavin covariance ``M_1 int M^{-1} sigma sigma^T M^{-T} ds M_1^T``."""
    return skeleton.cov.copy()


def endpoint_gradient(vf: VectorFieldSystem, skeleton: SkeletonSolution, k: CameronMartinPath) -> np.ndarray:
    """Directional derivative of ``h -> phi0(h)_1`` in the direction ``k``."""
    _check_driver(vf, k)
    if k.grid != skeleton.grid:
        k = k.refine(skeleton.grid)
    dt = skeleton.grid.dt
    return skeleton.M[-1] @ np.einsum("cij,cj->i", skeleton.cell_G, k.derivative) * dt


def adjoint_control(skeleton: SkeletonSolution, lam) -> np.ndarray:
    """Cell values of ``G_s^T M_1^T lam``; the gradient of ``lam . phi0(h)_1`` in ``h'``."""
    v = skeleton.M[-1].T @ np.asarray(lam, dtype=float)
    return np.einsum("cij,i->cj", skeleton.cell_G, v)


def first_variation(vf: VectorFieldSystem, skeleton: SkeletonSolution, w) -> np.ndarray:
    """``phi1_1 = M_1 int M^{-1} [sigma(phi0) dw + d_eps b(0, phi0) ds]``.

    Args:
        w: A ``SampledPath`` on the skeleton grid, or node values of shape
            ``(..., N+1, d)`` for a batch of drivers.

    Returns:
        Endpoint value, shape ``(n,)`` or ``(..., n)``.
    """
    if isinstance(w, SampledPath):
        if w.grid != skeleton.grid:
            raise GridError("driver and skeleton grids differ")
        dw = w.increments
    else:
        w = np.asarray(w, dtype=float)
        if w.shape[-2] != skeleton.grid.n_steps + 1 or w.shape[-1] != vf.d:
            raise GridError(f"driver values have shape {w.shape}")
        dw = np.diff(w, axis=-2)
    dt = skeleton.grid.dt
    drift = skeleton.Minv @ vf.ddrift_deps(0.0, skeleton.phi0)[..., None]
    drift_int = dt * (drift.sum(axis=0) - 0.5 * (drift[0] + drift[-1]))[:, 0]
    noise = np.einsum("cij,...cj->...i", skeleton.cell_G, dw)
    return (noise + drift_int) @ skeleton.M[-1].T


def davie_steps(vf: VectorFieldSystem, a, x1: np.ndarray, x2: np.ndarray, dt, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Step-2 Euler scheme on cell increments.

    ``y += sigma(y) x1 + sum_jk (D_{V_j} V_k)(y) x2[j, k] + b(eps, y) dt``.

    Args:
        x1: ``(..., N, d)`` first-level cell increments.
        x2: ``(..., N, d, d)`` second-level cell increments.
        dt: Scalar or ``(..., N)`` time increments.

    Returns:
        Node values ``(..., N+1, n)`` and a per-row finiteness mask.
    """
    batch = x1.shape[:-2]
    n_cells = x1.shape[-2]
    dt = np.broadcast_to(np.asarray(dt, dtype=float), batch + (n_cells,))
    y = np.broadcast_to(np.asarray(a, dtype=float), batch + (vf.n,)).copy()
    out = np.empty(batch + (n_cells + 1, vf.n))
    out[..., 0, :] = y
    with np.errstate(all="ignore"):
        for i in range(n_cells):
            s = vf.sigma(y)
            corr = np.einsum("...ikl,...lj,...jk->...i", vf.dsigma(y), s, x2[..., i, :, :])
            y = y + np.einsum("...ij,...j->...i", s, x1[..., i, :]) + corr + vf.drift(eps, y) * dt[..., i, None]
            out[..., i + 1, :] = y
    return out, np.all(np.isfinite(out), axis=(-2, -1))


def solve_rde_level2(vf: VectorFieldSystem, X: Level2RoughPath, eps: float, a) -> SampledPath:
    """Solve the rough equation driven by ``X`` with the step-2 Euler scheme.

    ``X`` is either the time-paired lift (dimension ``d + 1``, time last) or a
    plain ``d``-dimensional lift, in which case the grid step is the clock.

    Raises:
        BlowUpError: if the solution stops being finite.
    """
    d = vf.d
    if X.dim == d + 1:
        dt = X.first[:, d]
    elif X.dim == d:
        dt = X.grid.dt
    else:
        raise GridError(f"rough path has dimension {X.dim}, system needs {d} or {d + 1}")
    y, ok = davie_steps(vf, np.asarray(a, dtype=float).reshape(vf.n), X.first[:, :d], X.second[:, :d, :d], dt, eps)
    if not ok:
        raise BlowUpError(f"{vf.name}: rough flow is not finite")
    return SampledPath(X.grid, y)
