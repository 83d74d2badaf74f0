"""Batch command-line interface.

Subcommands: simulate (write a simulated panel and its weights),
estimate (GMM fit of a panel read from CSV), identify (identification
diagnostics), montecarlo (bias/MAE grid over designs), and verify-vclq
(check the covariance formulas against the brute-force oracle).

Configuration is a JSON object with a ``schema_version`` field; unknown
keys are rejected before any computation runs.  Every output file is
written atomically (temp file, then rename) and accompanied by a
``manifest.json`` recording the effective configuration, the seed, and
library versions.  Exit codes: 0 success, 1 usage or configuration
error, 2 computation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import tempfile
from datetime import datetime, timezone
from typing import Callable

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .errors import ConfigError, SpanelError
from .estimator import default_template, efficient_gmm, gmm_estimate, wald_test
from .identification import diagnose
from .moments import ModelDesign, default_moment_set
from .montecarlo import grid_csv, run_grid
from .netsim import McDesign, simulate_panel
from .panel import PanelData, read_panel_csv, read_weights_csv, write_panel_csv, write_weights_csv
from .vclq_verify import verify_configurations

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_LAGS = [["z", 0, 0, 0], ["z", 0, 1, 0]]

# per-subcommand configuration schema: key -> (default, allowed types)
_NUM = (int, float)
SCHEMAS: dict[str, dict[str, tuple]] = {
    "simulate": {
        "n": (100, (int,)),
        "T": (2, (int,)),
        "lambda": (0.5, _NUM),
        "delta": (0.5, _NUM),
        "beta1": (1.0, _NUM),
        "replication": (0, (int,)),
    },
    "estimate": {
        "lags": (DEFAULT_LAGS, (list,)),
        "max_order": (2, (int,)),
        "quad_weights": (["sym", "gram"], (list,)),
        "two_step": (True, (bool,)),
        "estimate_factors": (False, (bool,)),
        "lambda_bounds": ([-0.99, 0.99], (list,)),
        "wald": (None, (dict,)),
    },
    "identify": {
        "lags": (DEFAULT_LAGS, (list,)),
        "max_order": (2, (int,)),
        "quad_weights": (["sym", "gram"], (list,)),
        "tau1": (1e-4, _NUM),
        "tau2": (1e-4, _NUM),
    },
    "montecarlo": {
        "lambdas": ([0.1, 0.5, 0.7], (list,)),
        "deltas": ([0.5, 0.3, 0.1], (list,)),
        "n": (100, (int,)),
        "T": (2, (int,)),
        "replications": (1000, (int,)),
    },
    "verify-vclq": {
        "configs": (20, (int,)),
        "draws": (100_000, (int,)),
        "n": (20, (int,)),
    },
}
# accepted by every subcommand
COMMON_KEYS: dict[str, tuple] = {
    "schema_version": (SCHEMA_VERSION, (int,)),
    "seed": (0, (int,)),
    "workers": (None, (int,)),
}


def schema_help(subcommand: str) -> str:
    lines = [f"configuration keys for '{subcommand}' (JSON object):"]
    for key, (default, _) in {**COMMON_KEYS, **SCHEMAS[subcommand]}.items():
        lines.append(f"  {key} (default: {json.dumps(default)})")
    return "\n".join(lines)


def load_config(path: str | None, subcommand: str) -> dict:
    """Read, validate, and default-fill a subcommand configuration."""
    allowed = {**COMMON_KEYS, **SCHEMAS[subcommand]}
    if path is None:
        raw = {}
    else:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a JSON object")
        if "schema_version" not in raw:
            raise ConfigError("config is missing the schema_version field")
        unknown = sorted(set(raw) - set(allowed))
        if unknown:
            raise ConfigError(f"unknown config keys for {subcommand}: {unknown}")
    config = {key: default for key, (default, _) in allowed.items()}
    for key, value in raw.items():
        _, types = allowed[key]
        if value is not None and not (
            isinstance(value, types) and not (bool not in types and isinstance(value, bool))
        ):
            names = "/".join(t.__name__ for t in types)
            raise ConfigError(f"config key {key!r} must be {names}, got {value!r}")
        config[key] = value
    if config["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {config['schema_version']} (expected {SCHEMA_VERSION})"
        )
    return config


def resolve_workers(args, config: dict) -> int:
    """Flag, then config, then SPANEL_WORKERS, then available parallelism."""
    for source, value in (
        ("--workers", args.workers),
        ("config", config.get("workers")),
        ("SPANEL_WORKERS", os.environ.get("SPANEL_WORKERS")),
    ):
        if value is not None:
            workers = int(value)
            if workers < 1:
                raise ConfigError(f"{source}: worker count must be >= 1, got {workers}")
            return workers
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# atomic output


def _atomic_file(out_dir: str, filename: str, writer: Callable[[str], None]) -> str:
    """Write through a temp file in the same directory, then rename."""
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=filename + ".", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, os.path.join(out_dir, filename))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return filename


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(out_dir: str, filename: str, payload: dict) -> str:
    text = json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n"

    def write(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)

    return _atomic_file(out_dir, filename, write)


def _write_text(out_dir: str, filename: str, text: str) -> str:
    def write(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)

    return _atomic_file(out_dir, filename, write)


def write_manifest(out_dir: str, subcommand: str, config: dict, workers: int,
                   outputs: list[str]) -> str:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": config["seed"],
        "workers": workers,
        "outputs": outputs,
        "versions": {
            "spanel": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    return _write_json(out_dir, "manifest.json", manifest)


# ---------------------------------------------------------------------------
# estimation plumbing shared by estimate/identify


def _load_design(args, config: dict) -> tuple[ModelDesign, object]:
    if not args.data or not args.weights:
        raise ConfigError("this subcommand requires --data and --weights")
    y, x, z, units, periods = read_panel_csv(args.data)
    M = read_weights_csv(args.weights, units, len(periods))
    panel = PanelData(y, x=x, z=z, M=M)
    lags = tuple(tuple(term) for term in config["lags"])
    design = ModelDesign(
        panel, lag_spec=lags, estimate_factors=bool(config.get("estimate_factors", False))
    )
    template = default_template(design)
    ms = default_moment_set(
        design, template, max_order=config["max_order"], kinds=tuple(config["quad_weights"])
    )
    return design, ms


def _theta_labels(design: ModelDesign, template) -> list[str]:
    labels = [f"lambda_{i + 1}" for i in range(template.lam.size)]
    labels += [f"beta_{i + 1}" for i in range(template.beta.size)]
    labels += [f"rho_{i + 1}" for i in range(template.rho.size)]
    if design.estimate_factors:
        labels += [f"f_{t + 1}" for t in range(design.T - 1)]
    return labels


# ---------------------------------------------------------------------------
# subcommand handlers: each returns the list of files written


def cmd_simulate(args, config: dict, out_dir: str, workers: int) -> list[str]:
    design = McDesign(
        n=config["n"], T=config["T"], lambda0=config["lambda"], delta=config["delta"],
        beta1=config["beta1"], seed=config["seed"],
    )
    sim = simulate_panel(design, config["replication"])
    outputs = [
        _atomic_file(out_dir, "panel.csv", lambda tmp: write_panel_csv(tmp, sim.panel)),
        _atomic_file(out_dir, "weights.csv", lambda tmp: write_weights_csv(tmp, sim.panel.M)),
    ]
    return outputs


def cmd_estimate(args, config: dict, out_dir: str, workers: int) -> list[str]:
    design, ms = _load_design(args, config)
    lo, hi = config["lambda_bounds"]
    options = {"lambda_bounds": (float(lo), float(hi))}
    if config["two_step"]:
        res = efficient_gmm(design, ms, **options)
    else:
        res = gmm_estimate(design, ms, **options)
    template = default_template(design)
    labels = _theta_labels(design, template)
    se = np.sqrt(np.diag(res.Psi_hat) / res.n)
    per_coef = []
    for j, label in enumerate(labels):
        R = np.zeros((1, len(labels)))
        R[0, j] = 1.0
        outcome = wald_test(res, R, [0.0])
        per_coef.append({
            "coefficient": label,
            "statistic": outcome.statistic,
            "dof": outcome.dof,
            "p_value": outcome.p_value,
        })
    payload = {
        "coefficients": dict(zip(labels, res.theta_hat)),
        "theta_hat": res.theta_hat,
        "std_errors": dict(zip(labels, se)),
        "objective": res.objective,
        "converged": res.converged,
        "iterations": res.iterations,
        "n": res.n,
        "two_step": bool(config["two_step"]),
        "Psi_hat": res.Psi_hat,
        "wald": {"zero_restrictions": per_coef},
    }
    if config["wald"] is not None:
        spec = config["wald"]
        if not isinstance(spec, dict) or "R" not in spec or "r" not in spec:
            raise ConfigError('config key "wald" must be an object with "R" and "r"')
        outcome = wald_test(res, np.asarray(spec["R"], dtype=float), spec["r"])
        payload["wald"]["custom"] = {
            "R": spec["R"], "r": spec["r"],
            "statistic": outcome.statistic, "dof": outcome.dof, "p_value": outcome.p_value,
        }
    return [_write_json(out_dir, "estimate.json", payload)]


def cmd_identify(args, config: dict, out_dir: str, workers: int) -> list[str]:
    design, ms = _load_design(args, config)
    report = diagnose(design, ms, tau1=config["tau1"], tau2=config["tau2"])
    return [_write_json(out_dir, "identification.json", report.to_dict())]


def cmd_montecarlo(args, config: dict, out_dir: str, workers: int) -> list[str]:
    replications = config["replications"]
    if args.replications is not None:
        replications = args.replications
    table = run_grid(
        lambdas=tuple(config["lambdas"]),
        deltas=tuple(config["deltas"]),
        n=config["n"],
        T=config["T"],
        replications=replications,
        seed=config["seed"],
        workers=workers,
    )
    return [_write_text(out_dir, "table.csv", grid_csv(table))]


def cmd_verify_vclq(args, config: dict, out_dir: str, workers: int) -> list[str]:
    table = verify_configurations(
        configs=config["configs"], n=config["n"], draws=config["draws"],
        seed=config["seed"], workers=workers,
    )
    shown = table.copy()
    shown["status"] = np.where(shown.pop("within_3se"), "pass", "FAIL")
    print(shown.to_string(index=False))
    n_fail = int((table["within_3se"] == False).sum())  # noqa: E712
    print(f"{len(table) - n_fail} of {len(table)} checks within 3 SE")
    return [_write_text(out_dir, "vclq.csv", table.to_csv(index=False, lineterminator="\n"))]


HANDLERS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "identify": cmd_identify,
    "montecarlo": cmd_montecarlo,
    "verify-vclq": cmd_verify_vclq,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="spanel",
        description="Spatial-panel GMM tools: simulation, estimation, diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name, helptext in (
        ("simulate", "write one simulated panel and its weight matrix"),
        ("estimate", "GMM estimation on a panel CSV"),
        ("identify", "identification diagnostics on a panel CSV"),
        ("montecarlo", "bias/MAE summary grid over simulated designs"),
        ("verify-vclq", "check covariance formulas against the oracle"),
    ):
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--data", help="panel CSV (unit, period, y, x_*, z_*)")
        p.add_argument("--weights", help="weights CSV (i, j, value) or (p, t, i, j, value)")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--workers", type=int, help="worker processes (overrides config)")
        p.add_argument("--replications", type=int, help="replication count (montecarlo)")
        p.add_argument(
            "--log-level", default="warning",
            choices=["debug", "info", "warning", "error"], help="logging verbosity",
        )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, args.command)
        if args.seed is not None:
            config["seed"] = args.seed
        workers = resolve_workers(args, config)
        out_dir = args.out
        os.makedirs(out_dir, exist_ok=True)
        outputs = HANDLERS[args.command](args, config, out_dir, workers)
        outputs.append(write_manifest(out_dir, args.command, config, workers, outputs[:]))
        print(f"wrote {', '.join(outputs)} in {out_dir}")
        return 0
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(schema_help(args.command), file=sys.stderr)
        return 1
    except (SpanelError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
