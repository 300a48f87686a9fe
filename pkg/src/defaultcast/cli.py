"""Batch command-line front door.

Subcommands wire the pipeline end to end: ``fit-hazard``, ``fit-covariates``,
``predict``, ``pi-aggregate``, ``pi-individual``, ``simulate``, ``coverage``,
and ``roc``. Every run writes a ``manifest.json`` with the resolved
configuration, input digests, seeds, and timings, sufficient to reproduce the
run exactly. Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import CovariateDynamics
from .evaluation import (
    coverage_study,
    generate_scenario,
    power_curve,
    write_coverage_csv,
    write_roc_csv,
)
from .forecast import forecast_default_probabilities, write_forecast_csv
from .hazard import CompetingRisksHazard
from .panel import (
    EVENT_TYPES,
    _month_ordinal,
    difference_order3,
    load_panel,
    write_panel_files,
)
from .uncertainty import (
    aggregate_pi,
    individual_pi,
    naive_aggregate_pi,
    write_intervals_csv,
)

_DEFAULTS = {
    "q": 2,
    "M": 1000,
    "B": 200,
    "alpha": 0.1,
    "seed": 0,
    "threads": None,
    "tol": None,
    "n": 100,
    "tau": 123,
    "reps": 50,
    "tau_history": 123,
    "levels": "0.90,0.95",
    "horizon": 12,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage text + exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_horizons(text: str) -> tuple[int, ...]:
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_levels(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in str(text).split(",") if part.strip())


def _build_parser() -> _Parser:
    parser = _Parser(prog="defaultcast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, *, data=False, needs_out=True):
        p = sub.add_parser(name, help=help_text)
        if data:
            p.add_argument("--events")
            p.add_argument("--firms")
            p.add_argument("--macro")
        if needs_out:
            p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--tol", type=float)
        return p

    add("fit-hazard", "fit the competing-risks intensity model", data=True)

    p = add("fit-covariates", "fit the covariate dynamics by EM", data=True)
    p.add_argument("--q", type=int)

    p = add("predict", "Monte-Carlo default-probability forecasts", data=True)
    p.add_argument("--q", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--horizons")

    for name in ("pi-aggregate", "pi-individual"):
        p = add(name, f"calibrated prediction intervals ({name.split('-')[1]})", data=True)
        p.add_argument("--q", type=int)
        p.add_argument("--M", type=int)
        p.add_argument("--B", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--horizons")

    p = add("simulate", "write a synthetic data set from the built-in truth")
    p.add_argument("--n", type=int)
    p.add_argument("--tau", type=int)

    p = add("coverage", "empirical coverage study on synthetic worlds")
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--levels")
    p.add_argument("--horizons")
    p.add_argument("--tau-history", dest="tau_history", type=int)
    p.add_argument("--q", type=int)

    p = add("roc", "power curve from a forecast CSV and realized events")
    p.add_argument("--forecast", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--horizon", type=int)
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    cfg = dict(_DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as handle:
            file_cfg = json.load(handle)
        if not isinstance(file_cfg, dict):
            raise ValueError(f"{config_path}: config must be a JSON object")
        cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None:
            cfg[key] = value
    if cfg.get("threads") is None:
        cfg["threads"] = int(os.environ.get("DEFAULT_HORIZON_THREADS", "1"))
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if cfg.get("M") is not None and int(cfg["M"]) < 1:
        raise ValueError("M must be >= 1")
    if cfg.get("q") is not None and int(cfg["q"]) < 1:
        raise ValueError("q must be >= 1")
    alpha = cfg.get("alpha")
    if alpha is not None and not 0.0 < float(alpha) < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if cfg.get("B") is not None and alpha is not None and int(cfg["B"]) < 2.0 / float(alpha):
        raise ValueError(f"B must be at least 2/alpha = {2.0 / float(alpha):.0f}")
    if cfg.get("threads") is not None and int(cfg["threads"]) < 1:
        raise ValueError("threads must be >= 1")


def _require_inputs(cfg, out_dir):
    paths = {}
    for key in ("events", "firms", "macro"):
        value = cfg.get(key)
        if not value:
            raise ValueError(f"missing required input --{key}")
        if not Path(value).exists():
            raise ValueError(f"input file not found: {value}")
        paths[key] = value
    return load_panel(paths["events"], paths["firms"], paths["macro"]), paths


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def _fit_or_load_hazard(cfg, out_dir, panel, events):
    path = out_dir / "hazard_fit.json"
    if path.exists():
        return CompetingRisksHazard.from_json(path.read_text()), []
    tol = cfg.get("tol")
    hazard = CompetingRisksHazard(**({"tol": tol} if tol else {})).fit(panel, events)
    path.write_text(hazard.to_json() + "\n")
    return hazard, ["hazard_fit.json"]


def _fit_or_load_dynamics(cfg, out_dir, panel):
    path = out_dir / "covariate_fit.json"
    diffs = difference_order3(panel)
    if path.exists():
        dynamics = CovariateDynamics.from_json(path.read_text())
        dynamics.attach_factor_path(diffs)
        return dynamics, []
    kwargs = {"q": int(cfg["q"]), "strict": False}
    if cfg.get("tol"):
        kwargs["tol"] = float(cfg["tol"])
    dynamics = CovariateDynamics(**kwargs).fit(diffs)
    path.write_text(dynamics.to_json() + "\n")
    return dynamics, ["covariate_fit.json"]


def _cmd_fit_hazard(cfg, out_dir):
    (panel, events), inputs = _require_inputs(cfg, out_dir)
    tol = cfg.get("tol")
    hazard = CompetingRisksHazard(**({"tol": tol} if tol else {})).fit(panel, events)
    (out_dir / "hazard_fit.json").write_text(hazard.to_json() + "\n")
    return inputs, ["hazard_fit.json"]


def _cmd_fit_covariates(cfg, out_dir):
    (panel, _), inputs = _require_inputs(cfg, out_dir)
    kwargs = {"q": int(cfg["q"]), "strict": False}
    if cfg.get("tol"):
        kwargs["tol"] = float(cfg["tol"])
    dynamics = CovariateDynamics(**kwargs).fit(difference_order3(panel))
    (out_dir / "covariate_fit.json").write_text(dynamics.to_json() + "\n")
    return inputs, ["covariate_fit.json"]


def _cmd_predict(cfg, out_dir):
    (panel, events), inputs = _require_inputs(cfg, out_dir)
    hazard, new1 = _fit_or_load_hazard(cfg, out_dir, panel, events)
    dynamics, new2 = _fit_or_load_dynamics(cfg, out_dir, panel)
    result = forecast_default_probabilities(
        hazard.beta_,
        dynamics.params_,
        panel,
        events=events,
        horizons=_parse_horizons(cfg.get("horizons") or "1..12"),
        n_paths=int(cfg["M"]),
        seed=int(cfg["seed"]),
        factor_state=dynamics.factor_state(),
    )
    write_forecast_csv(result, out_dir / "forecast.csv", out_dir / "forecast.json")
    return inputs, new1 + new2 + ["forecast.csv", "forecast.json"]


def _cmd_pi(cfg, out_dir, individual: bool):
    (panel, events), inputs = _require_inputs(cfg, out_dir)
    hazard, new1 = _fit_or_load_hazard(cfg, out_dir, panel, events)
    dynamics, new2 = _fit_or_load_dynamics(cfg, out_dir, panel)
    horizons = _parse_horizons(cfg.get("horizons") or "1..12")
    kwargs = dict(
        horizons=horizons,
        alpha=float(cfg["alpha"]),
        B=int(cfg["B"]),
        n_paths=int(cfg["M"]),
        seed=int(cfg["seed"]),
        n_jobs=int(cfg["threads"]),
    )
    if individual:
        audit = "replicates_individual.jsonl"
        intervals = individual_pi(
            hazard, dynamics, panel, events, audit_path=out_dir / audit, **kwargs
        )
        name = "intervals_individual.csv"
    else:
        audit = "replicates_aggregate.jsonl"
        intervals = aggregate_pi(
            hazard, dynamics, panel, events, audit_path=out_dir / audit, **kwargs
        )
        result = forecast_default_probabilities(
            hazard.beta_,
            dynamics.params_,
            panel,
            events=events,
            horizons=horizons,
            n_paths=int(cfg["M"]),
            seed=int(cfg["seed"]),
            factor_state=dynamics.factor_state(),
        )
        intervals = intervals + naive_aggregate_pi(result, float(cfg["alpha"]))
        name = "intervals_aggregate.csv"
    write_intervals_csv(intervals, out_dir / name)
    return inputs, new1 + new2 + [name, audit]


def _cmd_simulate(cfg, out_dir):
    scenario, panel, events = generate_scenario(
        int(cfg["n"]), int(cfg["seed"]), tau=int(cfg["tau"])
    )
    write_panel_files(
        panel,
        events,
        out_dir / "firms.csv",
        out_dir / "macro.csv",
        out_dir / "events.csv",
    )
    truth = {
        "n": scenario.n,
        "tau": scenario.tau,
        "seed": scenario.seed,
        "beta": scenario.beta.tolist(),
        "kappa": scenario.dynamics.kappa.tolist(),
    }
    (out_dir / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return {}, ["firms.csv", "macro.csv", "events.csv", "truth.json"]


def _cmd_coverage(cfg, out_dir):
    rows = coverage_study(
        [int(cfg["n"])],
        reps=int(cfg["reps"]),
        levels=_parse_levels(cfg["levels"]),
        horizons=_parse_horizons(cfg.get("horizons") or "1..6"),
        B=int(cfg["B"]),
        n_paths=int(cfg["M"]),
        tau_history=int(cfg["tau_history"]),
        seed=int(cfg["seed"]),
        q=int(cfg["q"]),
        n_jobs=int(cfg["threads"]),
    )
    write_coverage_csv(rows, out_dir / "coverage.csv")
    return {}, ["coverage.csv"]


def _read_events_raw(path):
    out = {}
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["firm_id", "event_month", "event_type"]:
            raise ValueError(f"{path}: expected header firm_id,event_month,event_type")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            firm, month, kind = (c.strip() for c in row)
            if kind not in EVENT_TYPES:
                raise ValueError(f"{path}:{lineno}: bad event_type {kind!r}")
            out[firm] = (_month_ordinal(month, f"{path}:{lineno}: "), kind)
    return out


def _cmd_roc(cfg, out_dir):
    forecast_path = Path(cfg["forecast"])
    if not forecast_path.exists():
        raise ValueError(f"input file not found: {forecast_path}")
    sidecar = forecast_path.with_suffix(".json")
    if not sidecar.exists():
        raise ValueError(f"forecast sidecar not found: {sidecar}")
    meta = json.loads(sidecar.read_text())
    origin = _month_ordinal(meta["origin"])
    horizon = int(cfg["horizon"])

    scores = {}
    with open(forecast_path, newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            if int(row["horizon_months"]) == horizon:
                scores[row["firm_id"]] = float(row["rho_hat"])
    if not scores:
        raise ValueError(f"no rows at horizon {horizon} in {forecast_path}")
    events = _read_events_raw(cfg["events"])
    firms = sorted(scores)
    outcome = []
    for firm in firms:
        rec = events.get(firm)
        hit = (
            rec is not None
            and rec[1] == "default"
            and origin < rec[0] <= origin + horizon
        )
        outcome.append(int(hit))
    curve = power_curve(np.array([scores[f] for f in firms]), np.array(outcome))
    write_roc_csv(curve, out_dir / "roc.csv")
    print(f"auc={curve.auc:.6f}")
    return {"forecast": str(forecast_path), "events": cfg["events"]}, ["roc.csv"]


_COMMANDS = {
    "fit-hazard": _cmd_fit_hazard,
    "fit-covariates": _cmd_fit_covariates,
    "predict": _cmd_predict,
    "pi-aggregate": lambda cfg, out: _cmd_pi(cfg, out, individual=False),
    "pi-individual": lambda cfg, out: _cmd_pi(cfg, out, individual=True),
    "simulate": _cmd_simulate,
    "coverage": _cmd_coverage,
    "roc": _cmd_roc,
}


def run(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = _resolve(args)
        out_dir = Path(cfg["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        inputs, outputs = _COMMANDS[args.command](cfg, out_dir)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    manifest = {
        "command": args.command,
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "inputs": {key: {"path": p, "sha256": _sha256(p)} for key, p in inputs.items()},
        "outputs": outputs,
        "version": __version__,
        "elapsed_seconds": round(time.time() - started, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


def main() -> None:
    sys.exit(run())
