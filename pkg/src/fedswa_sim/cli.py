"""Command line runner: ``fedswa-sim {run,sweep,stability,validate}``.

Every option lives in one flat namespace of dotted keys (``task.dim``,
``sched.rho``, ``algo.gamma``, ``run.rounds``, ``stability.axis``). Keys can
come from a JSON/YAML file (``--config``), from ``--set key=value`` or from
the generated ``--<key>`` flags. A list value on any non-list key turns the
plan into a Cartesian grid.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from .algorithms import AlgoConfig
from .engine import DivergenceError, RunConfig, TaskConfig, run_experiment
from .schedules import LrSchedule
from .stability import AXES, stability_sweep

log = logging.getLogger("fedswa_sim")

_SECTIONS = {"task": TaskConfig, "algo": AlgoConfig, "sched": LrSchedule}
_RUN_FIELDS = ("rounds", "participation", "batch_size", "seed", "diagnostics", "threads")
_STABILITY_DEFAULTS = {"axis": "n", "values": [50, 100, 200], "trials": 20, "pool_size": 1000,
                       "seed": 0}
# keys whose value is itself a list (never expanded into a grid)
_LIST_KEYS = {"stability.values"}

ALIASES = {
    "algorithm": "algo.name",
    "task": "task.kind",
    "local_iters": "sched.K",
    "clients": "task.clients",
    "dim": "task.dim",
    "samples_per_client": "task.samples_per_client",
    "hetero_knob": "task.hetero_knob",
    "noise_sigma": "task.noise_sigma",
    "concentration": "task.concentration",
    "clip": "task.clip",
    "eta_l": "sched.eta_l",
    "rho": "sched.rho",
    "round_decay": "sched.round_decay",
    "alpha": "algo.alpha",
    "gamma": "algo.gamma",
    "sam_radius": "algo.sam_radius",
    "ctrl_option": "algo.ctrl_option",
    "mom_beta": "algo.mom_beta",
    "rounds": "run.rounds",
    "participation": "run.participation",
    "batch_size": "run.batch_size",
    "seed": "run.seed",
    "threads": "run.threads",
    "diagnostics": "run.diagnostics",
    "axis": "stability.axis",
    "values": "stability.values",
    "trials": "stability.trials",
}


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key."""


def _defaults() -> Dict[str, object]:
    out = {}
    for sec, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            out[f"{sec}.{f.name}"] = getattr(cls(), f.name)
    run = RunConfig()
    for name in _RUN_FIELDS:
        out[f"run.{name}"] = getattr(run, name)
    for name, v in _STABILITY_DEFAULTS.items():
        out[f"stability.{name}"] = v
    return out


DEFAULTS = _defaults()


def canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if key in _LIST_KEYS:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            value = [value]
        try:
            return [float(v) if "." in str(v) or "e" in str(v).lower() else int(v) for v in value]
        except ValueError:
            raise ConfigError(f"{key}: expected a list of numbers, got {value!r}") from None
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None


def _parse_scalar_text(text: str):
    """Flag/`--set` text to a python value; bare ``a,b`` becomes a list."""
    val = yaml.safe_load(text) if text.strip() else ""
    if isinstance(val, str) and "," in val:
        return [yaml.safe_load(v) for v in val.split(",") if v.strip()]
    return val


def _flatten(doc, prefix="") -> Dict[str, object]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        full = ALIASES.get(key, key)
        if isinstance(v, dict) and full not in DEFAULTS:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config_file(path) -> Dict[str, object]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text)  # JSON is a subset of YAML
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    return _flatten(doc)


# ------------------------------------------------------------------- plan


@dataclass
class PlanItem:
    run_id: str
    config: RunConfig
    keys: Dict[str, object]


@dataclass
class ExperimentPlan:
    items: List[PlanItem]
    out_dir: Path
    resolved: Dict[str, object]
    grid_keys: List[str] = field(default_factory=list)
    stability: Dict[str, object] = field(default_factory=dict)


def _build_run_config(keys: Dict[str, object]) -> RunConfig:
    parts = {}
    for sec, cls in _SECTIONS.items():
        kw = {k.split(".", 1)[1]: v for k, v in keys.items() if k.startswith(sec + ".")}
        try:
            parts[sec] = cls(**kw)
        except ValueError as exc:
            raise ConfigError(f"{_blame(sec, cls, kw)}: {exc}") from None
    run_kw = {k.split(".", 1)[1]: v for k, v in keys.items() if k.startswith("run.")}
    try:
        return RunConfig(task=parts["task"], algo=parts["algo"], sched=parts["sched"], **run_kw)
    except ValueError as exc:
        raise ConfigError(f"{_blame_run(parts, run_kw)}: {exc}") from None


def _blame(sec, cls, kw) -> str:
    """Name the first key that fails on its own against the defaults."""
    base = cls()
    for name, v in kw.items():
        if v == getattr(base, name):
            continue
        try:
            cls(**{name: v})
        except ValueError:
            return f"{sec}.{name}"
    return sec


def _blame_run(parts, run_kw) -> str:
    for name, v in run_kw.items():
        if name == "participation":
            continue
        try:
            RunConfig(task=parts["task"], participation=1, **{name: v})
        except ValueError:
            return f"run.{name}"
    return "run.participation"


def derive_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0] & 0x7FFFFFFF)


def build_plan(overrides: Dict[str, object], out_dir=".", allow_grid=True) -> ExperimentPlan:
    """Resolve overrides against defaults and expand list-valued keys."""
    resolved = dict(DEFAULTS)
    grid = {}
    for raw, value in overrides.items():
        key = canonical_key(raw)
        if isinstance(value, (list, tuple)) and key not in _LIST_KEYS:
            if not value:
                raise ConfigError(f"{key}: empty list")
            grid[key] = [_coerce(key, v) for v in value]
        else:
            resolved[key] = _coerce(key, value)
    if grid and not allow_grid:
        raise ConfigError(f"list values need the 'sweep' verb: {', '.join(sorted(grid))}")
    axis = resolved["stability.axis"]
    if axis not in AXES:
        raise ConfigError(f"stability.axis: expected one of {AXES}, got {axis!r}")
    names = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in names))) or [()]
    items = []
    for idx, combo in enumerate(combos):
        keys = dict(resolved)
        keys.update(zip(names, combo))
        if len(combos) > 1 and "run.seed" not in grid:
            keys["run.seed"] = derive_seed(resolved["run.seed"], idx)
        cfg = _build_run_config(keys)
        items.append(PlanItem(f"r{idx:03d}", cfg, keys))
    stab = {k.split(".", 1)[1]: v for k, v in resolved.items() if k.startswith("stability.")}
    return ExperimentPlan(items, Path(out_dir), resolved, names, stab)


def plan_config_doc(plan: ExperimentPlan) -> dict:
    doc = {k: v for k, v in plan.resolved.items()}
    doc["grid"] = {k: sorted({item.keys[k] for item in plan.items}, key=str) for k in plan.grid_keys}
    return doc


# -------------------------------------------------------------- execution


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _execute_run(item: PlanItem, out: Path) -> dict:
    entry = {"id": item.run_id, "seed": item.config.seed, "final_metrics": None, "status": "ok"}
    try:
        metrics = run_experiment(item.config)
    except DivergenceError as exc:
        entry["status"] = "diverged"
        entry["error"] = str(exc)
        entry["diagnostics"] = exc.diagnostics
        metrics = exc.metrics
        if metrics is not None:
            entry["partial"] = True
    if metrics is not None:
        entry["final_metrics"] = metrics.final()
        _write(out / f"metrics_{item.run_id}.csv", metrics.to_csv())
        _write(out / f"run_{item.run_id}.json", metrics.to_json(item.config))
    return entry


def _execute_stability(item: PlanItem, out: Path, stab: dict) -> dict:
    entry = {"id": item.run_id, "seed": int(stab["seed"]), "final_metrics": None, "status": "ok"}
    try:
        rep = stability_sweep(item.config, stab["axis"], stab["values"], int(stab["trials"]),
                              seed=int(stab["seed"]), pool_size=int(stab["pool_size"]))
    except DivergenceError as exc:
        entry.update(status="diverged", error=str(exc))
        return entry
    rep.write_csv(out / f"stability_{item.run_id}.csv")
    entry["final_metrics"] = {
        "axis": rep.axis,
        "values": list(rep.values),
        "mean_gap_param": rep.mean_gap.tolist(),
        "mean_gap_loss": rep.gap_loss.mean(axis=1).tolist(),
        "theory_bound": rep.theory.tolist(),
        "sigma_g": rep.sigma_g.tolist(),
        "slope": rep.slope,
    }
    entry["slope"] = rep.slope
    return entry


def execute(plan: ExperimentPlan, verb: str, jobs: int = 1) -> int:
    out = plan.out_dir
    out.mkdir(parents=True, exist_ok=True)

    def one(item):
        if verb == "stability":
            return _execute_stability(item, out, plan.stability)
        return _execute_run(item, out)

    if jobs > 1 and len(plan.items) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            runs = list(pool.map(one, plan.items))
    else:
        runs = [one(item) for item in plan.items]
    summary = {"config": plan_config_doc(plan), "runs": runs}
    _write(out / "summary.json", json.dumps(summary, indent=1, default=_json_default))
    for r in runs:
        log.info("%s %s", r["id"], r["status"])
    return 0 if all(r["status"] == "ok" for r in runs) else 3


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# -------------------------------------------------------------------- argv


def _add_key_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config keys")
    for key in DEFAULTS:
        g.add_argument(f"--{key}", dest=f"key:{key}", metavar="V", default=None,
                       help=f"default {DEFAULTS[key]!r}")
    for alias, key in ALIASES.items():
        g.add_argument(f"--{alias}", dest=f"key:{alias}", metavar="V", default=None,
                       help=f"alias of --{key}")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedswa-sim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {"run": "one simulation", "sweep": "grid of simulations",
             "stability": "twin-run stability probe", "validate": "resolve and check a config"}
    for verb, text in helps.items():
        p = sub.add_parser(verb, help=text, allow_abbrev=False)
        p.add_argument("--config", help="JSON or YAML file of dotted keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="plan items run in parallel")
        _add_key_flags(p)
    return parser


def collect_overrides(ns: argparse.Namespace) -> Dict[str, object]:
    keys: Dict[str, object] = {}
    if ns.config:
        keys.update(load_config_file(ns.config))
    for item in ns.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        keys[k.strip()] = _parse_scalar_text(v)
    for dest, v in vars(ns).items():
        if dest.startswith("key:") and v is not None:
            keys[dest[4:]] = _parse_scalar_text(v)
    # several spellings of one key: last canonical write wins in file < --set < flag order
    merged: Dict[str, object] = {}
    for k, v in keys.items():
        merged[canonical_key(k)] = v
    return merged


def main(argv: Optional[List[str]] = None) -> int:
    ns = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        overrides = collect_overrides(ns)
        plan = build_plan(overrides, ns.out, allow_grid=ns.verb != "run")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if ns.verb == "validate":
        print(json.dumps({"runs": len(plan.items), "config": plan_config_doc(plan)}, indent=1,
                         default=_json_default))
        return 0
    if ns.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return execute(plan, ns.verb, ns.jobs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
