"""Command-line entry point.

    safestab simulate   --config run.yaml --seed 42 --out out/
    safestab verify     --config run.yaml --paths 200
    safestab identities --config run.yaml
    safestab sweep      --set preset=fig2_ell --paths 50

Configs are YAML; ``--set a.b=value`` overrides any key (values are parsed
as YAML scalars).  Errors go to stderr as one JSON object
``{"category", "field", "message"}`` with a category-specific exit status.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import car_following as cf
from .controllers import SontagController
from .errors import (
    ConfigParseError,
    ConfigurationError,
    SafestabError,
    UnknownNameError,
)
from .functionals import FUNCTIONALS
from .history import grid_size
from .sdde import simulate
from .verification import boundary_check, identity_suite, run_monte_carlo

EXIT_CODES = {
    "config_parse": 2,
    "unknown_name": 3,
    "config_error": 4,
}
EXIT_RUNTIME = 5

MODELS = ("car_following",)
CONTROLLERS = ("sliding", "sontag")
LOGS = ("V", "B", "h", "U")
CONSTRAINTS = ("headway", "h")

DEFAULTS: dict = {
    "model": "car_following",
    "preset": "fig1_l",
    "index": 1,
    "params": {},
    "xi": None,
    "functionals": {"lyapunov": "quadratic_tracking", "barrier": "headway_barrier"},
    "controller": {"kind": "sliding", "gain": None, "smoothing": 0.1, "varrho": None, "lambda": 1.0},
    "dt": 1e-3,
    "horizon": 60.0,
    "paths": 200,
    "seed": 0,
    "constraint": "headway",
    "logs": ["V", "B", "h", "U"],
    "identities": {"count": 1000, "boundary_samples": 20},
    "out": "out",
}


# -- config ---------------------------------------------------------------

def _merge(base: dict, extra: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {name!r}", field=name)
        if isinstance(base[key], dict) and key != "params":
            if not isinstance(val, dict):
                raise ConfigurationError(f"{name} must be a mapping", field=name)
            out[key] = _merge(base[key], val, prefix=f"{name}.")
        else:
            out[key] = val
    return out


def _set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigParseError(f"--set expects key=value, got {assignment!r}", field=assignment)
    key, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigParseError(f"cannot parse value for {key}: {exc}", field=key) from None
    parts = key.strip().split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"{key}: {part} is not a mapping", field=key)
    node[parts[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> dict:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigParseError(f"cannot read config: {exc}", field="config") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigParseError(f"invalid YAML: {exc}", field="config") from None
        if not isinstance(raw, dict):
            raise ConfigParseError("config must be a mapping", field="config")
    for item in overrides:
        _set(raw, item)
    cfg = _merge(DEFAULTS, raw)
    validate(cfg)
    return cfg


def _positive(cfg: dict, key: str, integer: bool = False, allow_zero: bool = False):
    val = cfg[key]
    kind = int if integer else (int, float)
    if isinstance(val, bool) or not isinstance(val, kind):
        raise ConfigurationError(f"{key} must be a {'integer' if integer else 'number'}", field=key)
    if val < 0 or (val == 0 and not allow_zero):
        raise ConfigurationError(f"{key} must be {'nonnegative' if allow_zero else 'positive'}", field=key)


def validate(cfg: dict) -> None:
    if cfg["model"] not in MODELS:
        raise UnknownNameError(f"unknown model {cfg['model']!r}", field="model")
    for role, name in cfg["functionals"].items():
        if name not in FUNCTIONALS:
            raise UnknownNameError(f"unknown functional {name!r}", field=f"functionals.{role}")
    if cfg["functionals"]["lyapunov"] != "quadratic_tracking" or cfg["functionals"]["barrier"] != "headway_barrier":
        raise ConfigurationError("car_following uses quadratic_tracking and headway_barrier", field="functionals")
    if cfg["controller"]["kind"] not in CONTROLLERS:
        raise UnknownNameError(f"unknown controller {cfg['controller']['kind']!r}", field="controller.kind")
    if cfg["constraint"] not in CONSTRAINTS:
        raise UnknownNameError(f"unknown constraint {cfg['constraint']!r}", field="constraint")
    for name in cfg["logs"]:
        if name not in LOGS:
            raise UnknownNameError(f"unknown log {name!r}", field="logs")
    known = {f.name for f in fields(cf.CarFollowingParams)}
    for key in cfg["params"]:
        if key not in known:
            raise ConfigurationError(f"unknown parameter {key!r}", field=f"params.{key}")
    cf.preset_members(cfg["preset"])
    _positive(cfg, "dt")
    _positive(cfg, "horizon")
    _positive(cfg, "paths", integer=True)
    _positive(cfg, "seed", integer=True, allow_zero=True)
    if cfg["seed"] >= 2**64:
        raise ConfigurationError("seed must fit in 64 bits", field="seed")
    for key in ("count", "boundary_samples"):
        val = cfg["identities"][key]
        if isinstance(val, bool) or not isinstance(val, int) or val < 0:
            raise ConfigurationError("must be a nonnegative integer", field=f"identities.{key}")
    grid_size(float(cfg["params"].get("Delta", cf.CarFollowingParams.Delta)), float(cfg["dt"]))
    steps = cfg["horizon"] / cfg["dt"]
    if abs(steps - round(steps)) > 1e-9 * steps:
        raise ConfigurationError("horizon must be a multiple of dt", field="horizon")


def build_scenario(cfg: dict, index: int | None = None) -> cf.Scenario:
    params = dict(cfg["params"])
    if "lead_profile" in params:
        lp = params["lead_profile"]
        if not isinstance(lp, dict) or set(lp) != {"times", "accels"}:
            raise ConfigurationError("lead_profile needs times and accels", field="params.lead_profile")
        params["lead_profile"] = cf.LeadProfile(tuple(map(float, lp["times"])), tuple(map(float, lp["accels"])))
    ctrl = cfg["controller"]
    for key, name in (("gain", "gain"), ("smoothing", "smoothing"), ("varrho", "varrho")):
        if ctrl[key] is not None:
            params[name] = float(ctrl[key])
    if cfg["xi"] is not None:
        xi = cfg["xi"]
        if not isinstance(xi, list) or len(xi) != 3:
            raise ConfigurationError("xi must be a list of 3 numbers", field="xi")
        params["xi"] = tuple(float(v) for v in xi)
    idx = cfg["index"] if index is None else index
    try:
        sc = cf.preset(cfg["preset"], idx, dt=float(cfg["dt"]), horizon=float(cfg["horizon"]), **params)
    except TypeError as exc:
        raise ConfigurationError(str(exc), field="params") from None
    grid_size(sc.params.Delta, sc.dt)
    return sc


def controller_for(cfg: dict, sc: cf.Scenario):
    if cfg["controller"]["kind"] == "sontag":
        return SontagController(sc.sclkf, sc.model, lam=float(cfg["controller"]["lambda"]))
    return sc.controller


def constraint_for(cfg: dict, sc: cf.Scenario):
    if cfg["constraint"] == "h":
        return sc.scbkf.eval_h
    return lambda phi: cf.headway_margin(phi.newest)


def _log_functions(sc: cf.Scenario, names) -> dict:
    table = {"V": sc.sclkf.value, "B": sc.scbkf.eval_barrier, "h": sc.scbkf.eval_h, "U": sc.surface.value}
    return {name: table[name] for name in names}


# -- output ---------------------------------------------------------------

def write_atomic(path: Path, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file and rename; never leaves partial files."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _echo(cfg: dict) -> dict:
    """Effective config for provenance; the output directory is left out so
    reports written to different places stay byte-identical."""
    return {k: v for k, v in cfg.items() if k != "out"}


def _dump(data) -> str:
    return json.dumps(data, indent=1, sort_keys=True) + "\n"


# -- commands -------------------------------------------------------------

def cmd_simulate(cfg: dict, out: Path) -> dict:
    sc = build_scenario(cfg)
    trace = simulate(
        sc.model, controller_for(cfg, sc), sc.init(), sc.horizon, sc.dt, cfg["seed"],
        logs=_log_functions(sc, cfg["logs"]),
    )
    write_atomic(out / "trace.csv", trace.to_csv())
    status = {"rows": len(trace.times), "failure": None if trace.ok else vars(trace.failure)}
    return status


def _verify(cfg: dict, sc: cf.Scenario):
    v_d = sc.params.v_d
    return run_monte_carlo(
        sc.model, controller_for(cfg, sc), sc.init(), sc.horizon, sc.dt,
        cfg["paths"], cfg["seed"],
        constraint=constraint_for(cfg, sc),
        curves=_log_functions(sc, ("V", "B", "h", "U")),
        terminal_error=lambda x: np.abs(x[..., 0] - v_d),
        decreasing_curve="V",
        config={**_echo(cfg), "member": sc.name},
    )


def _write_report(report, out: Path) -> None:
    write_atomic(out / "report.json", report.to_json() + "\n")
    write_atomic(out / "report.txt", report.summary())
    write_atomic(out / "per_path.csv", report.per_path_csv())


def cmd_verify(cfg: dict, out: Path) -> dict:
    report = _verify(cfg, build_scenario(cfg))
    _write_report(report, out)
    return {"safety_probability": report.safety_probability, "failed": report.failed}


def cmd_identities(cfg: dict, out: Path) -> dict:
    sc = build_scenario(cfg)
    rng = np.random.default_rng(cfg["seed"])
    buffers = cf.random_interior_buffers(sc, cfg["identities"]["count"], rng)
    report = identity_suite(SontagController(sc.sclkf, sc.model), sc.controller, buffers)
    boundary = boundary_check(sc.surface, sc.scbkf, sc.init(), cfg["identities"]["boundary_samples"], rng)
    doc = {"identities": report.to_dict(), "boundary": boundary.to_dict(), "config": _echo(cfg)}
    text = report.summary() + (
        f"boundary check on {boundary.count} buffers: {'PASS' if boundary.passed else 'WARN'} "
        f"(min U^2 ratio {boundary.min_ratio:.6g})\n"
    )
    write_atomic(out / "identities.json", _dump(doc))
    write_atomic(out / "identities.txt", text)
    return {"passed": report.passed, "boundary_passed": boundary.passed}


def cmd_sweep(cfg: dict, out: Path) -> dict:
    rows = ["member,safety_prob,ci_lo,ci_hi,mean_terminal_velocity_error"]
    for idx in cf.preset_members(cfg["preset"]):
        member = {**cfg, "index": idx}
        report = _verify(member, build_scenario(member, idx))
        _write_report(report, out / f"{cfg['preset']}_{idx}")
        rows.append(
            f"{idx},{report.safety_probability:.17g},{report.ci_lo:.17g},{report.ci_hi:.17g},"
            f"{report.mean_terminal_error:.17g}"
        )
    write_atomic(out / "summary.csv", "\n".join(rows) + "\n")
    return {"members": len(rows) - 1}


COMMANDS = {
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "identities": cmd_identities,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safestab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML scenario config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
    parser.add_argument("--seed", type=int, help="seed (simulate) or seed_base (verify/sweep)")
    parser.add_argument("--paths", type=int)
    parser.add_argument("--out", help="output directory")
    return parser


def _fail(exc: SafestabError) -> int:
    payload = {
        "category": exc.category,
        "field": getattr(exc, "field", None),
        "message": str(exc),
    }
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return EXIT_CODES.get(exc.category, EXIT_RUNTIME)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    for flag in ("seed", "paths", "out"):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{flag}={json.dumps(val)}")
    try:
        cfg = load_config(args.config, overrides)
        status = COMMANDS[args.command](cfg, Path(cfg["out"]))
    except SafestabError as exc:
        return _fail(exc)
    print(json.dumps({"command": args.command, **status}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
