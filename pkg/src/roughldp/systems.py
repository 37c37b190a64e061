"""Built-in catalog of vector field systems, keyed by name."""
from __future__ import annotations

import numpy as np

from .flow import VectorFieldSystem


def _zeros_like_state(x, n):
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape[:-1] + (n,))


def additive(n: int = 1) -> VectorFieldSystem:
    """``sigma = Id_n``, ``b = 0``."""
    n = int(n)
    eye = np.eye(n)

    def sigma(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eye, x.shape[:-1] + (n, n)).copy()

    return VectorFieldSystem(
        n, n,
        sigma=sigma,
        drift=lambda eps, x: _zeros_like_state(x, n),
        dsigma=lambda x: np.zeros(np.shape(x)[:-1] + (n, n, n)),
        ddrift=lambda eps, x: np.zeros(np.shape(x)[:-1] + (n, n)),
        ddrift_deps=lambda eps, x: _zeros_like_state(x, n),
        name="additive", params={"n": n},
    )


def linear1d(s: float = 1.0) -> VectorFieldSystem:
    """Geometric Brownian motion ``sigma(x) = s x``, ``b = 0``."""
    s = float(s)
    return VectorFieldSystem(
        1, 1,
        sigma=lambda x: s * np.asarray(x, dtype=float)[..., None],
        drift=lambda eps, x: _zeros_like_state(x, 1),
        dsigma=lambda x: np.full(np.shape(x)[:-1] + (1, 1, 1), s),
        ddrift=lambda eps, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
        ddrift_deps=lambda eps, x: _zeros_like_state(x, 1),
        name="linear1d", params={"s": s},
    )


def ou1d(theta: float = 1.0, mu: float = 0.0) -> VectorFieldSystem:
    """Ornstein-Uhlenbeck: ``sigma = 1``, ``b = theta (mu - x)``."""
    theta, mu = float(theta), float(mu)
    return VectorFieldSystem(
        1, 1,
        sigma=lambda x: np.ones(np.shape(x)[:-1] + (1, 1)),
        drift=lambda eps, x: theta * (mu - np.asarray(x, dtype=float)),
        dsigma=lambda x: np.zeros(np.shape(x)[:-1] + (1, 1, 1)),
        ddrift=lambda eps, x: np.full(np.shape(x)[:-1] + (1, 1), -theta),
        ddrift_deps=lambda eps, x: _zeros_like_state(x, 1),
        name="ou1d", params={"theta": theta, "mu": mu},
    )


def rotating2d(kappa: float = 0.5, gamma: float = 0.2, u=(0.3, -0.1)) -> VectorFieldSystem:
    """Rotation ``sigma(x) = R(kappa x_1)`` with drift ``-gamma x + eps u``."""
    kappa, gamma = float(kappa), float(gamma)
    u = np.asarray(u, dtype=float).reshape(2)

    def rot(theta):
        c, s = np.cos(theta), np.sin(theta)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)

    def sigma(x):
        return rot(kappa * np.asarray(x, dtype=float)[..., 0])

    def dsigma(x):
        theta = kappa * np.asarray(x, dtype=float)[..., 0]
        out = np.zeros(theta.shape + (2, 2, 2))
        out[..., 0] = kappa * rot(theta + np.pi / 2)
        return out

    return VectorFieldSystem(
        2, 2,
        sigma=sigma,
        drift=lambda eps, x: -gamma * np.asarray(x, dtype=float) + eps * u,
        dsigma=dsigma,
        ddrift=lambda eps, x: np.broadcast_to(-gamma * np.eye(2), np.shape(x)[:-1] + (2, 2)).copy(),
        ddrift_deps=lambda eps, x: np.broadcast_to(u, np.shape(x)).copy(),
        name="rotating2d", params={"kappa": kappa, "gamma": gamma, "u": u.tolist()},
    )


def zero(n: int = 1) -> VectorFieldSystem:
    """No noise and no drift; nothing but ``a`` is reachable."""
    n = int(n)
    return VectorFieldSystem(
        n, n,
        sigma=lambda x: np.zeros(np.shape(x)[:-1] + (n, n)),
        drift=lambda eps, x: _zeros_like_state(x, n),
        dsigma=lambda x: np.zeros(np.shape(x)[:-1] + (n, n, n)),
        ddrift=lambda eps, x: np.zeros(np.shape(x)[:-1] + (n, n)),
        ddrift_deps=lambda eps, x: _zeros_like_state(x, n),
        name="zero", params={"n": n},
    )


def random_elliptic(n: int = 2, d: int = 2, seed: int = 0, strength: float = 0.3) -> VectorFieldSystem:
    """Smooth bounded system with random coefficients.

    ``sigma_ij = S_ij + strength sum_k C_ijk sin(x_k + P_ijk)`` and
    ``b_i = -x_i / 2 + beta_i sin((D x)_i) + eps u_i``. With ``d >= n`` and a
    small ``strength`` the diffusion matrix is elliptic near the origin.
    """
    if d < n:
        raise ValueError(f"need d >= n for ellipticity, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((n, d)) / np.sqrt(d) + np.eye(n, d)
    C = strength * rng.standard_normal((n, d, n)) / n
    P = rng.uniform(0, 2 * np.pi, (n, d, n))
    beta = 0.5 * rng.standard_normal(n)
    D = rng.standard_normal((n, n)) / np.sqrt(n)
    u = rng.standard_normal(n)
    gamma = 0.5

    def sigma(x):
        x = np.asarray(x, dtype=float)
        return S + np.sum(C * np.sin(x[..., None, None, :] + P), axis=-1)

    def dsigma(x):
        x = np.asarray(x, dtype=float)
        return C * np.cos(x[..., None, None, :] + P)

    def drift(eps, x):
        x = np.asarray(x, dtype=float)
        return -gamma * x + beta * np.sin(x @ D.T) + eps * u

    def ddrift(eps, x):
        x = np.asarray(x, dtype=float)
        return -gamma * np.eye(n) + (beta * np.cos(x @ D.T))[..., :, None] * D

    return VectorFieldSystem(
        n, d,
        sigma=sigma, drift=drift, dsigma=dsigma, ddrift=ddrift,
        ddrift_deps=lambda eps, x: np.broadcast_to(u, np.shape(x)).copy(),
        name="random_elliptic", params={"n": n, "d": d, "seed": seed, "strength": strength},
    )


CATALOG = {
    "additive": additive,
    "linear1d": linear1d,
    "ou1d": ou1d,
    "rotating2d": rotating2d,
    "zero": zero,
    "random_elliptic": random_elliptic,
}

# systems with sigma sigma^T > 0 everywhere under default parameters
ELLIPTIC = ("additive", "ou1d", "rotating2d")


def build_system(name: str, **params) -> VectorFieldSystem:
    """Look up ``name`` in the catalog and build it with ``params``."""
    try:
        factory = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; known: {sorted(CATALOG)}") from None
    return factory(**params)
