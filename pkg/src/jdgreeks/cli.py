"""Batch front end: INI-style run configs, reports as CSV or JSON.

Config format: ``[section]`` headers, ``key = value`` lines, ``#`` comments.  Errors are
collected over the whole file and reported with line numbers.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .coeff_models import MODELS, ConfigurationError, ParamVector, make_model, validate_assumptions
from .levy_models import (
    CompoundPoissonGaussian,
    DomainError,
    LevyMeasureSpec,
    TemperedStable,
    order_exponent_estimate,
    simulated_mass_cached,
    truncation_bias_proxy,
)
from .mc_estimator import (
    CHUNK,
    EstimatorFailure,
    EstimatorReport,
    PayoffSpec,
    Problem,
    analytic_for,
    convergence_study,
    estimate_greeks_fd_problem,
    estimate_greeks_weighted,
)
from .path_engine import GridSpec, simulate_batch
from .weight_engine import UnsupportedWeightError, WeightUndefinedError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ESTIMATOR = 0, 1, 2, 3
CSV_HEADER = (
    "quantity", "mode", "estimate", "se", "ci_lo", "ci_hi",
    "n_paths", "n_excluded", "n_steps", "seed", "runtime_ms", "artifact_version",
)
COMMANDS = ("validate", "simulate", "greeks", "oracle-compare", "convergence")
COMPARE_K = 3.0

LEVY_PARAMS = {
    "compound-poisson-gaussian": ("intensity", "mark_mean", "mark_sd"),
    "tempered-stable": ("scale", "stability", "lambda_plus", "lambda_minus"),
}


class ConfigError(ValueError):
    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        super().__init__("\n".join(f"line {ln}: {msg}" for ln, msg in errors))


# ---------------------------------------------------------------------------
# schema


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _int(s: str) -> int:
    return int(s, 10)


def _bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1"):
        return True
    if s.lower() in ("false", "no", "0"):
        return False
    raise ValueError("expected true or false")


def _list(s: str) -> tuple[str, ...]:
    items = tuple(p.strip() for p in s.split(",") if p.strip())
    if not items:
        raise ValueError("expected a non-empty list")
    return items


def _floats(s: str) -> tuple[float, ...]:
    return tuple(_float(p) for p in _list(s))


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any = None
    required: bool = False
    check: Callable[[Any], str | None] | None = None


def _positive(v):
    return None if v > 0 else "must be > 0"


def _at_least(n):
    return lambda v: None if v >= n else f"must be >= {n}"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


SCHEMA: dict[str, dict[str, Key]] = {
    "model": {
        "name": Key(_choice(*MODELS), required=True),
        "x0": Key(_float, required=True),
    },
    "levy": {
        "family": Key(_choice("none", *LEVY_PARAMS), required=True),
        "delta": Key(_float, 0.0, check=_nonneg),
        "truncation": Key(_choice("smooth", "hard"), "smooth"),
    },
    "grid": {
        "T": Key(_float, required=True, check=_positive),
        "n_steps": Key(_int, required=True, check=_at_least(1)),
    },
    "payoff": {
        "kind": Key(_choice("call", "put", "digital", "constant", "linear"), required=True),
        "strike": Key(_float, 0.0),
        "value": Key(_float, 0.0),
    },
    "run": {
        "command": Key(_choice(*COMMANDS), "greeks"),
        "n_paths": Key(_int, 10000, check=_at_least(2)),
        "seed": Key(_int, 0, check=_nonneg),
        "greeks": Key(_list, ("delta",)),
        "mode": Key(_choice("full", "diffusion-only", "jump-only", "geometric"), "full"),
        "method": Key(_choice("weighted", "fd"), "weighted"),
        "vega_form": Key(_choice("compensated", "literal"), "compensated"),
        "gamma3_form": Key(_choice("corrected", "printed"), "corrected"),
        "variants": Key(_bool, False),
        "bump_delta": Key(_float, None, check=_positive),
        "bump_gamma": Key(_float, None, check=_positive),
        "bump_vega": Key(_float, None, check=_positive),
        "axis": Key(_choice("n_paths", "n_steps", "delta"), "n_paths"),
        "levels": Key(_floats, None),
        "quantity": Key(str, "price"),
        "floor": Key(_float, 1e-6, check=_positive),
        "out": Key(str, None),
        "format": Key(_choice("csv", "json"), "csv"),
    },
}
SECTIONS = tuple(SCHEMA)


# ---------------------------------------------------------------------------
# config object


@dataclass(frozen=True)
class RunConfig:
    """Parsed entries in file order: ``((section, ((key, value), ...)), ...)``."""

    entries: tuple[tuple[str, tuple[tuple[str, Any], ...]], ...]

    def section(self, name: str) -> dict[str, Any]:
        for sec, items in self.entries:
            if sec == name:
                return dict(items)
        return {}

    def get(self, section: str, key: str) -> Any:
        sec = self.section(section)
        if key in sec:
            return sec[key]
        spec = SCHEMA[section].get(key)
        return spec.default if spec else None

    def with_value(self, section: str, key: str, value: Any) -> "RunConfig":
        out, done = [], False
        for sec, items in self.entries:
            if sec == section:
                d = dict(items)
                d[key] = value
                items = tuple(d.items())
                done = True
            out.append((sec, items))
        if not done:
            out.append((section, ((key, value),)))
        return RunConfig(tuple(out))

    # -- domain objects --------------------------------------------------------

    def model(self):
        return make_model(self.get("model", "name"))

    def eps(self) -> ParamVector:
        sec = self.section("model")
        return ParamVector({k: v for k, v in sec.items() if k not in SCHEMA["model"]})

    def levy(self) -> LevyMeasureSpec:
        sec = self.section("levy")
        fam = sec["family"]
        if fam == "none":
            family = CompoundPoissonGaussian(0.0, 0.0, 1.0)
        elif fam == "compound-poisson-gaussian":
            family = CompoundPoissonGaussian(sec["intensity"], sec["mark_mean"], sec["mark_sd"])
        else:
            family = TemperedStable(sec["scale"], sec["stability"], sec["lambda_plus"], sec["lambda_minus"])
        return LevyMeasureSpec(family, self.get("levy", "delta"), self.get("levy", "truncation"))

    def grid(self) -> GridSpec:
        return GridSpec(self.get("grid", "T"), self.get("grid", "n_steps"))

    def payoff(self) -> PayoffSpec:
        return PayoffSpec(
            self.get("payoff", "kind"), self.get("payoff", "strike"), self.get("payoff", "value")
        )

    def problem(self) -> Problem:
        return Problem(self.model(), self.levy(), self.grid(), self.eps(), self.get("model", "x0"), self.payoff())

    def bumps(self) -> dict[str, float]:
        out = {}
        for q in self.get("run", "greeks"):
            key = "bump_vega" if q.startswith("vega:") else f"bump_{q}"
            v = self.get("run", key)
            if v is not None:
                out[q] = v
        return out


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def emit(config: RunConfig) -> str:
    """Canonical text of a config; ``parse_config(emit(c)) == c``."""
    blocks = []
    for sec, items in config.entries:
        lines = [f"[{sec}]"] + [f"{k} = {_fmt(v)}" for k, v in items]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(emit(config).encode("utf-8")).hexdigest()


def parse_config(text: str) -> RunConfig:
    """Parse and validate; raises :class:`ConfigError` listing every problem found."""
    errors: list[tuple[int, str]] = []
    sections: dict[str, dict[str, Any]] = {}
    key_lines: dict[tuple[str, str], int] = {}
    sec_lines: dict[str, int] = {}
    current: str | None = None
    skipping = False
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SCHEMA:
                errors.append((ln, f"unknown section [{current}]"))
                current, skipping = None, True
                continue
            skipping = False
            if current in sections:
                errors.append((ln, f"duplicate section [{current}]"))
            sections.setdefault(current, {})
            sec_lines[current] = ln
            continue
        if "=" not in line:
            errors.append((ln, f"expected 'key = value', got {line!r}"))
            continue
        if current is None:
            if not skipping:
                errors.append((ln, "entry before the first section"))
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        if key in sections[current]:
            errors.append((ln, f"duplicate key {current}.{key}"))
            continue
        sections[current][key] = value
        key_lines[(current, key)] = ln

    typed: dict[str, dict[str, Any]] = {}
    extra_float: dict[str, tuple[str, ...]] = {}
    if "model" in sections and sections["model"].get("name") in MODELS:
        extra_float["model"] = MODELS[sections["model"]["name"]].param_names
    if "levy" in sections and sections["levy"].get("family") in LEVY_PARAMS:
        extra_float["levy"] = LEVY_PARAMS[sections["levy"]["family"]]
    for sec, items in sections.items():
        typed[sec] = {}
        for key, raw in items.items():
            ln = key_lines[(sec, key)]
            spec = SCHEMA[sec].get(key)
            if spec is None and key in extra_float.get(sec, ()):
                spec = Key(_float, required=True)
            if spec is None:
                errors.append((ln, f"unknown key {sec}.{key}"))
                continue
            try:
                v = spec.parse(raw)
            except ValueError as exc:
                errors.append((ln, f"{sec}.{key}: invalid value {raw!r} ({exc})"))
                continue
            msg = spec.check(v) if spec.check else None
            if msg:
                errors.append((ln, f"{sec}.{key} {msg}"))
                continue
            typed[sec][key] = v
    for sec in ("model", "levy", "grid", "payoff"):
        if sec not in sections:
            errors.append((0, f"missing section [{sec}]"))
            continue
        needed = [k for k, s in SCHEMA[sec].items() if s.required] + list(extra_float.get(sec, ()))
        for k in needed:
            if k not in sections[sec]:
                errors.append((sec_lines[sec], f"missing key {sec}.{k}"))
    if errors:
        raise ConfigError(sorted(errors))

    order = [s for s in sections]
    cfg = RunConfig(tuple((s, tuple(typed[s].items())) for s in order))
    _cross_check(cfg, sec_lines, key_lines)
    return cfg


def _cross_check(cfg: RunConfig, sec_lines, key_lines) -> None:
    errors: list[tuple[int, str]] = []

    def at(sec, key=None):
        return key_lines.get((sec, key), sec_lines.get(sec, 0))

    try:
        cfg.levy()
    except (DomainError, ValueError) as exc:
        errors.append((at("levy", "delta"), f"levy: {exc}"))
    model = cfg.model()
    if model.geometric and not cfg.get("model", "x0") > 0:
        errors.append((at("model", "x0"), "model.x0 must be > 0 for the geometric model"))
    try:
        model.check_params(cfg.eps())
    except ConfigurationError as exc:
        errors.append((sec_lines["model"], f"model: {exc}"))
    for q in cfg.get("run", "greeks"):
        if q in ("price", "delta", "gamma"):
            continue
        if q.startswith("vega:") and q[5:] in model.param_names:
            continue
        errors.append((at("run", "greeks"), f"run.greeks: unknown quantity {q!r}"))
    if cfg.get("run", "mode") == "geometric" and not model.geometric:
        errors.append((at("run", "mode"), "run.mode geometric needs model.name = geometric"))
    if cfg.get("run", "command") == "convergence":
        levels = cfg.get("run", "levels")
        if levels is None or len(levels) < 3:
            errors.append((at("run", "levels"), "run.levels needs at least 3 values for convergence"))
    if errors:
        raise ConfigError(sorted(errors))


# ---------------------------------------------------------------------------
# outputs


def record(rep: EstimatorReport) -> dict[str, Any]:
    return {
        "quantity": rep.quantity,
        "mode": rep.mode,
        "estimate": rep.estimate,
        "se": rep.se,
        "ci_lo": rep.ci_lo,
        "ci_hi": rep.ci_hi,
        "n_paths": rep.n_paths,
        "n_excluded": rep.n_excluded,
        "n_steps": rep.n_steps,
        "seed": rep.seed,
        "runtime_ms": round(rep.runtime_ms, 3),
        "artifact_version": __version__,
    }


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r[h]) for h in header])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def _meta(cfg: RunConfig, command: str, extra: dict | None = None) -> dict:
    return {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("run", "seed"),
        "artifact_version": __version__,
        **(extra or {}),
    }


def _write(cfg: RunConfig, command: str, header, rows, extra=None) -> None:
    meta = _meta(cfg, command, extra)
    fmt = cfg.get("run", "format")
    if fmt == "json":
        text = json.dumps({"meta": meta, "records": rows}, indent=2, default=_jsonable) + "\n"
    else:
        text = _csv_text(header, rows)
    out = cfg.get("run", "out")
    if out:
        Path(out).write_text(text)
        if fmt == "csv":
            Path(out + ".meta.json").write_text(json.dumps(meta, indent=2, default=_jsonable) + "\n")
    else:
        sys.stdout.write(text)
        if fmt == "csv":
            sys.stderr.write(json.dumps(meta, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(type(v))


# ---------------------------------------------------------------------------
# commands


def _validation_grids(cfg: RunConfig, problem: Problem):
    y0 = problem.state0
    y = np.linspace(y0 - 3.0, y0 + 3.0, 61)
    lo = max(problem.levy.delta, 1e-3)
    mags = np.geomspace(lo, max(1.0, lo), 25)
    return y, np.concatenate([-mags[::-1], mags])


def cmd_validate(cfg: RunConfig) -> int:
    sys.stdout.write(emit(cfg))
    problem = cfg.problem()
    mode = cfg.get("run", "mode")
    if mode == "geometric":
        mode = "full"
    if mode == "full" and cfg.get("levy", "family") == "none":
        mode = "diffusion-only"
    y, z = _validation_grids(cfg, problem)
    report = validate_assumptions(problem.model, problem.eps, y, z, cfg.get("run", "floor"), mode)
    lines = [report.render()]
    ok = report.passed
    lv = problem.levy
    try:
        mass = simulated_mass_cached(lv)
        mass_ok = math.isfinite(mass)
    except DomainError as exc:
        mass, mass_ok = math.nan, False
        lines.append(f"levy: {exc}")
    lines.append(f"simulated_mass: {'pass' if mass_ok else 'FAIL'} (value={mass:.6g})")
    ok &= mass_ok
    lines.append(f"truncation_bias_proxy: {truncation_bias_proxy(lv):.6g}")
    try:
        alpha = order_exponent_estimate(lv)
    except DomainError:
        alpha = None
    lines.append("order_exponent: " + ("fails" if alpha is None else f"{alpha:.4f}"))
    lines.append("result: " + ("pass" if ok else "FAIL"))
    sys.stderr.write("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_simulate(cfg: RunConfig) -> int:
    problem = cfg.problem()
    n, seed = cfg.get("run", "n_paths"), cfg.get("run", "seed")
    rows = []
    for c in range((n + CHUNK - 1) // CHUNK):
        size = min(CHUNK, n - c * CHUNK)
        res = simulate_batch(
            problem.model, problem.levy, problem.grid, problem.eps, problem.state0,
            size, seed, c, (), False, (),
        )
        spot = np.exp(res.x) if problem.model.geometric else res.x
        pay = problem.payoff(spot)
        for i in range(size):
            rows.append({
                "path": c * CHUNK + i,
                "state_T": float(res.x[i]),
                "x_T": float(spot[i]),
                "payoff": float(pay[i]),
                "n_jumps": int(res.n_jumps[i]),
                "aborted": int(res.aborted[i]),
            })
    _write(cfg, "simulate", ("path", "state_T", "x_T", "payoff", "n_jumps", "aborted"), rows)
    return EXIT_OK


def _weighted(cfg: RunConfig, problem: Problem, greeks) -> dict[str, EstimatorReport]:
    return estimate_greeks_weighted(
        problem, greeks, cfg.get("run", "n_paths"), cfg.get("run", "seed"),
        cfg.get("run", "mode"), cfg.get("run", "vega_form"), cfg.get("run", "gamma3_form"),
        cfg.get("run", "variants"),
    )


def cmd_greeks(cfg: RunConfig) -> int:
    problem = cfg.problem()
    greeks = cfg.get("run", "greeks")
    if cfg.get("run", "method") == "fd":
        reps = estimate_greeks_fd_problem(
            problem, greeks, cfg.get("run", "n_paths"), cfg.get("run", "seed"), cfg.bumps()
        )
    else:
        reps = _weighted(cfg, problem, greeks)
    flags = {k: list(r.flags) for k, r in reps.items() if r.flags}
    _write(cfg, "greeks", CSV_HEADER, [record(r) for r in reps.values()], {"flags": flags} if flags else None)
    return EXIT_OK


COMPARE_HEADER = (
    "quantity", "weighted", "weighted_se", "fd", "fd_se", "analytic",
    "z_weighted_fd", "z_weighted_analytic", "z_fd_analytic", "status",
)


def _z(a, sa, b, sb):
    s = math.hypot(sa, sb)
    return (a - b) / s if s > 0 else (0.0 if a == b else math.inf)


def cmd_oracle_compare(cfg: RunConfig) -> int:
    problem = cfg.problem()
    greeks = tuple(q for q in cfg.get("run", "greeks") if q != "price")
    n, seed = cfg.get("run", "n_paths"), cfg.get("run", "seed")
    w = _weighted(cfg, problem, greeks)
    f = estimate_greeks_fd_problem(problem, greeks, n, seed, cfg.bumps())
    exact = analytic_for(problem) or {}
    rows, ok = [], True
    for q in greeks:
        a = exact.get(q)
        z1 = _z(w[q].estimate, w[q].se, f[q].estimate, f[q].se)
        z2 = None if a is None else _z(w[q].estimate, w[q].se, a, 0.0)
        z3 = None if a is None else _z(f[q].estimate, f[q].se, a, 0.0)
        passed = all(abs(z) <= COMPARE_K for z in (z1, z2, z3) if z is not None)
        ok &= passed
        rows.append({
            "quantity": q, "weighted": w[q].estimate, "weighted_se": w[q].se,
            "fd": f[q].estimate, "fd_se": f[q].se, "analytic": a,
            "z_weighted_fd": z1, "z_weighted_analytic": z2, "z_fd_analytic": z3,
            "status": "pass" if passed else "FAIL",
        })
    _write(cfg, "oracle-compare", COMPARE_HEADER, rows)
    return EXIT_OK if ok else EXIT_FAIL


STUDY_HEADER = ("axis", "level", "quantity", "estimate", "se", "n_paths", "n_steps", "extra")


def cmd_convergence(cfg: RunConfig) -> int:
    problem = cfg.problem()
    axis = cfg.get("run", "axis")
    levels = cfg.get("run", "levels")
    if axis in ("n_paths", "n_steps"):
        levels = tuple(int(v) for v in levels)
    table = convergence_study(
        problem, axis, levels, cfg.get("run", "n_paths"), cfg.get("run", "seed"),
        cfg.get("run", "quantity"), cfg.get("run", "mode"),
    )
    rows = [
        {
            "axis": axis, "level": row.level, "quantity": table.quantity,
            "estimate": row.report.estimate, "se": row.report.se,
            "n_paths": row.report.n_paths, "n_steps": row.report.n_steps, "extra": row.extra,
        }
        for row in table.rows
    ]
    _write(cfg, "convergence", STUDY_HEADER, rows, {"slope": table.slope, "ratios": table.ratios})
    return EXIT_OK


HANDLERS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "greeks": cmd_greeks,
    "oracle-compare": cmd_oracle_compare,
    "convergence": cmd_convergence,
}


def run(command: str, cfg: RunConfig) -> int:
    try:
        return HANDLERS[command](cfg)
    except (EstimatorFailure, WeightUndefinedError, UnsupportedWeightError) as exc:
        sys.stderr.write(f"estimator failure: {exc}\n")
        return EXIT_ESTIMATOR


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jdgreeks", description="Monte Carlo Greeks for jump-diffusions.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS + ("run",):
        s = sub.add_parser(name, help="use [run] command" if name == "run" else None)
        s.add_argument("config", help="path to the run config")
        s.add_argument("--seed", type=int, help="override run.seed")
        s.add_argument("--out", help="output path (default stdout)")
        s.add_argument("--format", choices=("csv", "json"))
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    try:
        cfg = parse_config(text)
    except ConfigError as exc:
        for ln, msg in exc.errors:
            sys.stderr.write(f"config error: line {ln}: {msg}\n")
        return EXIT_CONFIG
    for key in ("seed", "out", "format"):
        v = getattr(args, key)
        if v is not None:
            if key == "seed" and v < 0:
                sys.stderr.write("config error: --seed must be >= 0\n")
                return EXIT_CONFIG
            cfg = cfg.with_value("run", key, v)
    command = cfg.get("run", "command") if args.command == "run" else args.command
    return run(command, cfg)


if __name__ == "__main__":
    raise SystemExit(main())
