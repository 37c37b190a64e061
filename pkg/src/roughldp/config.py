"""Experiment configuration in flat ``key = value`` text with sections.

Example::

    [experiment]
    kind = minimize-action
    seed = 20240917

    [system]
    name = additive
    n = 1

    [problem]
    a = 0.0
    a_prime = 1.0

    [events]
    ball_hstar = ball 2.0 hstar
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace

from .montecarlo import EventSpec
from .norms import BesovParams
from .rng import DEFAULT_SEED
from .systems import CATALOG, ELLIPTIC, build_system

KINDS = (
    "lift-check", "norms", "dyadic-decay", "skeleton",
    "minimize-action", "mc-pinned", "ldp-sweep",
)

# kinds whose outputs rely on sigma sigma^T > 0 at the start point
_NEEDS_ELLIPTIC = ("minimize-action", "mc-pinned", "ldp-sweep")

# field -> section; order fixes the serialised layout
_SECTIONS = {
    "experiment": ("kind", "seed", "workers", "out"),
    "problem": ("a", "a_prime", "h_end", "eps", "eps_ladder", "c_eta"),
    "grid": ("n_steps", "n_controls", "k_min", "k_max", "dims"),
    "besov": ("alpha", "m"),
    "budget": ("n_mc", "n_starts", "n_paths"),
}


_INT_TUPLES = ("dims",)


class ConfigError(ValueError):
    """Configuration that fails validation; maps to exit status 2."""


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_param(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if " " in text.strip() or "," in text:
        return _floats(text)
    return text


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings of one run.

    Args:
        kind: One of ``KINDS``.
        system: Catalog name of the vector field system.
        system_params: Keyword arguments for the catalog factory.
        a: Start point.
        a_prime: Pinned endpoint.
        h_end: Endpoint of the linear control used by ``skeleton``.
        eps: Noise level for ``mc-pinned``.
        eps_ladder: Noise levels for ``ldp-sweep``.
        c_eta: Mollifier bandwidth per unit ``eps``.
        n_steps: Simulation grid cells.
        n_controls: Control grid cells for the action minimisation.
        k_min: Coarsest dyadic level.
        k_max: Finest dyadic level.
        dims: Path dimensions for ``lift-check``.
        alpha: Besov regularity.
        m: Besov integrability parameter.
        n_mc: Monte Carlo samples per estimate.
        n_starts: Multistart count.
        n_paths: Random paths per dimension for ``lift-check``.
        events: Sweep events beyond the whole space.
        seed: Master seed.
        workers: Thread count handed to the modules.
        out: Output directory.
    """

    kind: str
    system: str = "additive"
    system_params: tuple = ()
    a: tuple = (0.0,)
    a_prime: tuple = (1.0,)
    h_end: tuple = (1.0,)
    eps: float = 0.5
    eps_ladder: tuple = (0.5, 0.35, 0.25, 0.175, 0.125)
    c_eta: float = 0.25
    n_steps: int = 32
    n_controls: int = 32
    k_min: int = 2
    k_max: int = 9
    dims: tuple = (1, 2, 3)
    alpha: float = 0.42
    m: int = 4
    n_mc: int = 100_000
    n_starts: int = 4
    n_paths: int = 1000
    events: tuple = ()
    seed: int = DEFAULT_SEED
    workers: int = 1
    out: str = "out"

    @property
    def params(self) -> BesovParams:
        return BesovParams(self.alpha, self.m)

    def system_kwargs(self) -> dict:
        return dict(self.system_params)

    def build_system(self):
        return build_system(self.system, **self.system_kwargs())

    def event_specs(self) -> tuple:
        out = []
        for event_id, kind, radius, center in self.events:
            out.append(EventSpec(event_id, kind, radius, center))
        return tuple(out)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["system_params"] = dict(self.system_params)
        out["events"] = [list(e) for e in self.events]
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    def to_text(self) -> str:
        """Serialised form; ``from_text(cfg.to_text()) == cfg``."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, keys in _SECTIONS.items():
            cp[section] = {k: _fmt(getattr(self, k)) for k in keys}
        cp["system"] = {"name": self.system, **{k: _fmt(v) for k, v in self.system_params}}
        cp["besov"] = {"alpha": _fmt(self.alpha), "m": _fmt(self.m)}
        cp["events"] = {e[0]: f"{e[1]} {_fmt(e[2])} {e[3]}" for e in self.events}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def validate(self) -> list[str]:
        """Gate checks run before any compute; returns warnings, raises on failure."""
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; known: {list(KINDS)}")
        if self.system not in CATALOG:
            raise ConfigError(f"unknown system {self.system!r}; known: {sorted(CATALOG)}")
        try:
            self.params
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        try:
            vf = self.build_system()
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {self.system}: {exc}") from None
        for name, size in (("a", vf.n), ("a_prime", vf.n)):
            if len(getattr(self, name)) != size:
                raise ConfigError(f"{name} must have {size} entries for {self.system}")
        if self.kind == "skeleton" and len(self.h_end) != vf.d:
            raise ConfigError(f"h_end must have {vf.d} entries for {self.system}")
        if self.n_mc < 1 or self.n_steps < 1 or self.n_controls < 1 or self.workers < 1:
            raise ConfigError("n_mc, n_steps, n_controls and workers must be positive")
        if not 0 <= self.k_min < self.k_max:
            raise ConfigError("need 0 <= k_min < k_max")
        if any(e <= 0 for e in self.eps_ladder) or self.eps <= 0:
            raise ConfigError("noise levels must be positive")
        if any(b >= a for a, b in zip(self.eps_ladder, self.eps_ladder[1:])):
            raise ConfigError("eps_ladder must be strictly decreasing")
        for event_id, kind, radius, center in self.events:
            if kind not in ("everything", "ball") or not radius > 0 or center not in ("hstar", "high"):
                raise ConfigError(f"bad event {event_id!r}")
        warnings = []
        try:
            vf.derivative_errors(raise_on_fail=True)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.kind in _NEEDS_ELLIPTIC:
            if vf.ellipticity(self.a) <= 1e-10:
                raise ConfigError(f"{self.system} is not elliptic at a = {list(self.a)}")
            if self.system not in ELLIPTIC:
                warnings.append(f"{self.system} is elliptic at a but not certified globally")
        return warnings


def from_text(text: str) -> ExperimentConfig:
    """Parse configuration text; unknown sections or keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    kw: dict = {}
    for section in cp.sections():
        items = dict(cp[section])
        if section == "system":
            if "name" in items:
                kw["system"] = items.pop("name")
            kw["system_params"] = tuple((k, _parse_param(v)) for k, v in items.items())
        elif section == "events":
            events = []
            for event_id, spec in items.items():
                parts = spec.split()
                if len(parts) != 3:
                    raise ConfigError(f"event {event_id!r} needs 'kind radius center'")
                events.append((event_id, parts[0], float(parts[1]), parts[2]))
            kw["events"] = tuple(events)
        elif section in _SECTIONS:
            for key, value in items.items():
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                kw[key] = _convert(key, types[key], value)
        else:
            raise ConfigError(f"unknown section [{section}]")
    if "kind" not in kw:
        raise ConfigError("[experiment] kind is required")
    return ExperimentConfig(**kw)


def _convert(key: str, type_name: str, value: str):
    try:
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
        if type_name == "tuple":
            return _ints(value) if key in _INT_TUPLES else _floats(value)
        return value
    except ValueError:
        raise ConfigError(f"cannot parse {value!r}") from None


def read_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return from_text(fh.read())
