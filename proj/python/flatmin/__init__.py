"""Flatness-aware optimisation: optimisers, flatness estimators, domain-shift benchmark."""

import json as _json

from ._core import *  # noqa: F401,F403
from ._core import (
    ConfigError,
    OptimizerConfig,
    flatness_report as _flatness_report,
    generate_domains as _generate_domains,
    objective_from_json as _objective_from_json,
    run_cli as _run_cli,
)


def objective(spec):
    """Build an objective from a config dict, e.g. {"kind": "quadratic", "diag": [2, 8]}."""
    return _objective_from_json(_json.dumps(spec))


def optimizer(**fields):
    return OptimizerConfig.from_json(_json.dumps(fields))


def domains(spec=None, seed=0):
    return _generate_domains(_json.dumps(spec or {}), seed)


def flatness(obj, theta, **options):
    return _json.loads(_flatness_report(obj, theta, _json.dumps(options)))


def cli(*args):
    """Run a flatmin subcommand; returns (exit_code, stdout, stderr)."""
    return _run_cli([str(a) for a in args])
