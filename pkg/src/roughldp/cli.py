"""Command line runner for the experiment families.

Each subcommand reads an optional configuration file, applies the flag
overrides, validates everything before computing, writes its artifacts and a
``manifest.json`` into the output directory, and exits with

* 0 on success, possibly with warnings recorded in the manifest,
* 2 on validation failures,
* 3 on numerical failures,
* 4 on I/O failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from datetime import datetime, timezone
from importlib import metadata

import numpy as np

from . import __version__
from .action import ActionProblem, H0ViolationError, OptimizerStallError, first_order_residual, minimize_action
from .config import KINDS, ConfigError, ExperimentConfig, read_config
from .dyadic import decay_experiment, decomposition_residual
from .flow import BlowUpError, EllipticityError, det_malliavin_cov, solve_skeleton
from .montecarlo import EventSpec, LdpSweepConfig, ball_decay_probe, estimate_heat_kernel, ldp_sweep
from .norms import besov_norm, unit_line_besov
from .rng import stream
from .rough_core import (
    CameronMartinPath,
    GroupElement,
    SampledPath,
    TimeGrid,
    dilate,
    geometric_defect,
    lift_piecewise_linear,
    max_chen_defect,
    young_translate,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

LIFT_TOL = 1e-12
# slack on the theoretical dyadic decay bound for Monte Carlo error
DECAY_SLACK = 0.1

PLOT_HEADER = ["x", "y", "series", "stderr"]
_SWEEP_HEADER = ["eps", "event_id", "estimate", "stderr", "ess", "eps2_log", "target_rate"]
_DECAY_HEADER = ["k", "statistic", "estimate", "stderr", "fitted_slope"]


class Outcome:
    """Artifacts of one experiment: file name to text, plus warnings."""

    def __init__(self):
        self.files: dict[str, str] = {}
        self.warnings: list[str] = []
        self.failures: list[str] = []

    def json(self, name: str, obj):
        self.files[name] = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _clean(x):
    """Recursively replace non-finite floats with ``None`` for strict JSON."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


# --- algebraic property suite --------------------------------------------------


def _random_path(rng, n_steps: int, d: int) -> SampledPath:
    scale = np.exp(rng.uniform(-2, 2))
    vals = np.vstack([np.zeros((1, d)), np.cumsum(scale * rng.standard_normal((n_steps, d)), axis=0)])
    return SampledPath(TimeGrid(n_steps), vals)


def lift_check(n_paths: int = 1000, dims=(1, 2, 3), seed: int = 0, n_steps: int = 8) -> dict:
    """Largest relative defect of each algebraic identity over random polygonal paths.

    Checked per path: Chen's identity and the shuffle identity for the lift,
    the group axioms on increments, the translation identity
    ``S2(w + h) = T_h S2(w)`` and the split of the level-two difference
    between a path and a coarser one.
    """
    worst = {"chen": 0.0, "shuffle": 0.0, "group": 0.0, "translation": 0.0, "decomposition": 0.0}
    for d in dims:
        for i in range(n_paths):
            rng = stream(seed, 7, d, i)
            w = _random_path(rng, n_steps, d)
            h = _random_path(rng, n_steps, d)
            y = _random_path(rng, n_steps // 2, d)
            size = 1.0 + float(np.max(np.abs(w.values))) ** 2 + float(np.max(np.abs(h.values))) ** 2
            X = lift_piecewise_linear(w)
            worst["chen"] = max(worst["chen"], max_chen_defect(X) / size)
            worst["shuffle"] = max(worst["shuffle"], geometric_defect(X) / size)

            g1, g2, g3 = (X.increment_idx(*sorted(rng.choice(n_steps + 1, 2, replace=False))) for _ in range(3))
            e = GroupElement.identity(d)
            grp = max(_gap((g1 * g2) * g3, g1 * (g2 * g3)), _gap(g1 * e, g1), _gap(g1 * g1.inverse(), e))
            grp = max(grp, g1.group_defect(), g2.group_defect())
            worst["group"] = max(worst["group"], grp / size)

            lhs = lift_piecewise_linear(w + h)
            rhs = young_translate(X, CameronMartinPath.from_path(h))
            tr = max(float(np.max(np.abs(lhs.first - rhs.first))), float(np.max(np.abs(lhs.second - rhs.second))))
            worst["translation"] = max(worst["translation"], tr / size)

            dec = decomposition_residual(w, y) / (size + float(np.max(np.abs(y.values))) ** 2)
            worst["decomposition"] = max(worst["decomposition"], dec)
    return {
        "n_paths": n_paths, "dims": list(dims), "n_steps": n_steps, "tolerance": LIFT_TOL,
        "defects": worst, "passed": {k: v <= LIFT_TOL for k, v in worst.items()},
    }


def _gap(a: GroupElement, b: GroupElement) -> float:
    return float(np.max(np.abs(a.a1 - b.a1)) + np.max(np.abs(a.a2 - b.a2)))


# --- experiment runners ----------------------------------------------------------


def _run_lift_check(cfg: ExperimentConfig, out: Outcome):
    report = lift_check(cfg.n_paths, cfg.dims, cfg.seed)
    out.json("lift_check.json", report)
    out.failures += [f"{k} defect above tolerance" for k, ok in report["passed"].items() if not ok]


def _run_norms(cfg: ExperimentConfig, out: Outcome):
    grid = TimeGrid(cfg.n_steps)
    line = lift_piecewise_linear(SampledPath(grid, grid.times[:, None]))
    alpha, m = cfg.params.level1
    numeric = besov_norm(line, 1, alpha, m)
    exact = unit_line_besov(alpha, m)
    lam = 1.7
    homog = abs(besov_norm(dilate(line, lam), 1, alpha, m) - lam * numeric) / (lam * numeric)
    probe = ball_decay_probe(cfg.params, n_mc=cfg.n_mc, seed=cfg.seed, n_steps=cfg.n_steps, workers=cfg.workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "radius", "prob", "hits", "used"])
    fits = {}
    for fit in probe.fits:
        for r, p, h, u in zip(fit.radii, fit.probs, fit.hits, fit.used):
            w.writerow([fit.level, f"{r:.10e}", f"{p:.10e}", int(h), int(u)])
        fits[f"level{fit.level}"] = {"slope": fit.slope, "intercept": fit.intercept, "flags": list(fit.flags)}
        out.warnings += [f"ball decay level {fit.level}: {f}" for f in fit.flags]
        if not fit.slope < 0:
            out.failures.append(f"ball decay slope at level {fit.level} is not negative")
    out.files["ball_decay.csv"] = buf.getvalue()
    out.json("norms.json", _clean({
        "unit_line": {"alpha": alpha, "m": m, "n_steps": cfg.n_steps, "numeric": numeric, "closed_form": exact,
                      "relative_error": abs(numeric - exact) / exact},
        "dilation_homogeneity_error": homog,
        "ball_decay": fits,
    }))


def _run_dyadic(cfg: ExperimentConfig, out: Outcome):
    table = decay_experiment(cfg.params, range(cfg.k_min, cfg.k_max + 1), cfg.n_mc, cfg.seed,
                             d=cfg.dims[0], workers=cfg.workers)
    out.files["decay.csv"] = table.to_csv()
    slopes = {s: table.slope(s) for s in ("z_level1", "J_zz", "J_zw", "W1_Z1")}
    limit = -cfg.params.decay_exponent + DECAY_SLACK
    out.json("decay.json", _clean({"slopes": slopes, "bound": -cfg.params.decay_exponent, "limit": limit}))
    if not slopes["z_level1"] <= limit:
        out.failures.append(f"level-one slope {slopes['z_level1']:.3f} above {limit:.3f}")
    for s in ("J_zz", "J_zw", "W1_Z1"):
        if not slopes[s] < 0:
            out.failures.append(f"{s} slope {slopes[s]:.3f} is not negative")


def _run_skeleton(cfg: ExperimentConfig, out: Outcome):
    vf = cfg.build_system()
    grid = TimeGrid(cfg.n_steps)
    sk = solve_skeleton(vf, CameronMartinPath.linear(grid, cfg.h_end), cfg.a)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"phi{i}" for i in range(vf.n)])
    for t, row in zip(grid.times, sk.path.values):
        w.writerow([f"{t:.10f}"] + [f"{v:.12e}" for v in row])
    out.files["skeleton.csv"] = buf.getvalue()
    cov = det_malliavin_cov(sk)
    out.json("skeleton.json", {
        "endpoint": sk.endpoint, "covariance": cov, "min_eigenvalue": float(np.linalg.eigvalsh(cov)[0]),
        "inverse_defect": sk.inverse_defect(),
    })


def _problem(cfg: ExperimentConfig) -> ActionProblem:
    return ActionProblem(cfg.build_system(), cfg.a, cfg.a_prime, n_controls=cfg.n_controls,
                         n_starts=cfg.n_starts, seed=cfg.seed, workers=cfg.workers)


def _run_minimize(cfg: ExperimentConfig, out: Outcome):
    p = _problem(cfg)
    res = minimize_action(p)
    body = json.loads(res.to_json())
    body["kkt_residual"] = first_order_residual(res, p)
    out.json("action.json", body)


def _run_mc_pinned(cfg: ExperimentConfig, out: Outcome):
    vf = cfg.build_system()
    est = estimate_heat_kernel(vf, cfg.eps, cfg.a, cfg.a_prime, n_mc=cfg.n_mc, seed=cfg.seed,
                               n_steps=cfg.n_steps, workers=cfg.workers, c_eta=cfg.c_eta)
    out.warnings += list(est.flags)
    out.json("heat_kernel.json", _clean({
        "eps": cfg.eps, "estimate": est.value, "stderr": est.stderr, "ess": est.ess, "n": est.n,
        "hits": est.hits, "flags": list(est.flags),
        "z_positive": est.value / est.stderr if est.stderr > 0 else None,
    }))


def _run_ldp_sweep(cfg: ExperimentConfig, out: Outcome):
    events = (EventSpec("everything"),) + cfg.event_specs()
    sweep = LdpSweepConfig(eps_ladder=cfg.eps_ladder, events=events, n_mc=cfg.n_mc, c_eta=cfg.c_eta,
                           params=cfg.params, n_steps=cfg.n_steps, seed=cfg.seed, workers=cfg.workers)
    res = ldp_sweep(sweep, _problem(cfg))
    out.files["sweep.csv"] = res.to_csv()
    out.json("sweep.json", _clean(res.summary()))
    for r in res.rows:
        out.warnings += [f"eps={r.eps} {r.event_id}: {f}" for f in r.flags]


RUNNERS = {
    "lift-check": _run_lift_check,
    "norms": _run_norms,
    "dyadic-decay": _run_dyadic,
    "skeleton": _run_skeleton,
    "minimize-action": _run_minimize,
    "mc-pinned": _run_mc_pinned,
    "ldp-sweep": _run_ldp_sweep,
}


# --- orchestration -----------------------------------------------------------------


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return __version__


def _write(directory: str, name: str, text: str):
    with open(os.path.join(directory, name), "w", newline="") as fh:
        fh.write(text)


def _error_record(status: int, exc: BaseException) -> dict:
    return {"status": status, "error": type(exc).__name__, "message": str(exc)}


def _report_error(status: int, exc: BaseException, out_dir: str | None) -> int:
    record = _error_record(status, exc)
    print(json.dumps(record), file=sys.stderr)
    if out_dir is not None:
        try:
            os.makedirs(out_dir, exist_ok=True)
            _write(out_dir, "error.json", json.dumps(record, indent=2) + "\n")
        except OSError:
            pass
    return status


def run(cfg: ExperimentConfig) -> int:
    """Validate, execute and write one experiment; returns the exit status."""
    start = time.perf_counter()
    try:
        warnings = cfg.validate()
    except ConfigError as exc:
        return _report_error(EXIT_VALIDATION, exc, cfg.out)
    out = Outcome()
    out.warnings += warnings
    try:
        with np.errstate(all="ignore"):
            RUNNERS[cfg.kind](cfg, out)
    except (EllipticityError, ConfigError) as exc:
        return _report_error(EXIT_VALIDATION, exc, cfg.out)
    except (H0ViolationError, OptimizerStallError, BlowUpError) as exc:
        return _report_error(EXIT_NUMERICAL, exc, cfg.out)
    status = EXIT_NUMERICAL if out.failures else EXIT_OK
    manifest = {
        "kind": cfg.kind,
        "config": cfg.to_dict(),
        "config_text": cfg.to_text(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "version": code_version(),
        "wall_time": time.perf_counter() - start,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "warnings": out.warnings,
        "failures": out.failures,
        "outputs": sorted(out.files),
        "status": status,
    }
    try:
        os.makedirs(cfg.out, exist_ok=True)
        for name, text in out.files.items():
            _write(cfg.out, name, text)
        _write(cfg.out, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        return _report_error(EXIT_IO, exc, None)
    for line in out.failures:
        print(f"FAIL {line}", file=sys.stderr)
    return status


# --- plot data -----------------------------------------------------------------------


class SchemaError(ValueError):
    pass


def _plot_rows(text: str) -> list[list]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    rows = list(reader)
    out = []
    if header == _SWEEP_HEADER:
        targets = {}
        for eps, event, est, se, _ess, e2l, target in rows:
            eps, est, se = float(eps), float(est), float(se)
            # delta method for eps^2 log mu
            e2se = eps**2 * se / est if est > 0 else math.nan
            out.append([eps, float(e2l), f"{event}:eps2_log", e2se])
            targets.setdefault(event, []).append((eps, float(target)))
        for event, pts in targets.items():
            out += [[eps, t, f"{event}:target_rate", 0.0] for eps, t in pts]
        return out
    if header == _DECAY_HEADER:
        slopes = {}
        for k, stat, est, se, slope in rows:
            out.append([int(k), float(est), stat, float(se)])
            slopes[stat] = float(slope)
        out += [[math.nan, s, f"{stat}:slope", math.nan] for stat, s in slopes.items()]
        return out
    raise SchemaError(f"unrecognised columns {header}")


def emit_plotdata(texts) -> str:
    """Long-format ``x, y, series, stderr`` table from sweep and decay CSV texts."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_HEADER)
    for text in texts:
        for x, y, series, se in _plot_rows(text):
            w.writerow([repr(float(x)), repr(float(y)), series, repr(float(se))])
    return buf.getvalue()


def _emit_main(args) -> int:
    try:
        texts = []
        for path in args.files:
            with open(path) as fh:
                texts.append(fh.read())
    except OSError as exc:
        return _report_error(EXIT_IO, exc, None)
    try:
        table = emit_plotdata(texts)
    except (SchemaError, ValueError) as exc:
        return _report_error(EXIT_VALIDATION, exc, None)
    try:
        os.makedirs(args.out, exist_ok=True)
        _write(args.out, "plotdata.csv", table)
    except OSError as exc:
        return _report_error(EXIT_IO, exc, None)
    return EXIT_OK


# --- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roughldp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=code_version())
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", help="configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out")
    p = sub.add_parser("emit-plotdata")
    p.add_argument("files", nargs="*")
    p.add_argument("--out", default="out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "emit-plotdata":
        return _emit_main(args)
    try:
        cfg = read_config(args.config) if args.config else ExperimentConfig(args.command)
    except OSError as exc:
        return _report_error(EXIT_IO, exc, args.out)
    except ConfigError as exc:
        return _report_error(EXIT_VALIDATION, exc, args.out)
    if cfg.kind != args.command:
        return _report_error(
            EXIT_VALIDATION, ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.command!r}"),
            args.out,
        )
    cfg = cfg.with_overrides(seed=args.seed, workers=args.workers, out=args.out)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
