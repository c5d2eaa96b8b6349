"""Python front-end for the INTapt desk-scale experiment library.

Configs and reports are plain dicts; everything else is computed by the
compiled ``_core`` module.
"""

from __future__ import annotations

import json
import os
from importlib import resources
from typing import Any, Mapping

from . import _core
from ._core import (
    ConfigError,
    Corpus,
    Error,
    InvariantViolation,
    StageError,
    Utterance,
    ctc_loss,
    ctc_loss_and_grad,
    ctc_loss_oracle,
    greedy_decode,
    load_corpus,
    output_root,
    wer,
)

OUTPUT_ROOT_ENV = _core.OUTPUT_ROOT_ENV

__all__ = [
    "ConfigError",
    "Corpus",
    "Error",
    "InvariantViolation",
    "OUTPUT_ROOT_ENV",
    "StageError",
    "Utterance",
    "build_corpus",
    "build_report",
    "config_hash",
    "ctc_loss",
    "ctc_loss_and_grad",
    "ctc_loss_oracle",
    "default_config",
    "format_tables",
    "greedy_decode",
    "load_corpus",
    "merge_config",
    "output_root",
    "report_schema",
    "run_experiment",
    "validate_config",
    "validate_report",
    "wer",
]


def default_config() -> dict[str, Any]:
    """Every experiment setting at its default value."""
    return json.loads(_core.default_config_json())


def _merge(base: dict[str, Any], patch: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in patch.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def merge_config(overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Defaults updated (recursively) by ``overrides``, then validated."""
    return validate_config(_merge(default_config(), overrides or {}))


def validate_config(config: Mapping[str, Any]) -> dict[str, Any]:
    """Validated and completed config; raises ConfigError on bad input."""
    return json.loads(_core.normalize_config_json(json.dumps(config)))


def config_hash(config: Mapping[str, Any]) -> str:
    return _core.config_hash(json.dumps(config))


def build_corpus(config: Mapping[str, Any]) -> Corpus:
    return _core.build_corpus(json.dumps(config))


def run_experiment(config: Mapping[str, Any], directory: str | os.PathLike[str]) -> dict[str, Any]:
    """Runs (or reuses) every stage under ``directory`` and returns the report."""
    return json.loads(_core.run_experiment(json.dumps(config), os.fspath(directory)))


def build_report(directory: str | os.PathLike[str]) -> dict[str, Any]:
    """Recomputes the report from the artifacts persisted in ``directory``."""
    return json.loads(_core.build_report(os.fspath(directory)))


def report_schema() -> dict[str, Any]:
    """JSON Schema of report.json."""
    return json.loads(resources.files(__package__).joinpath("report.schema.json").read_text())


def validate_report(report: Mapping[str, Any]) -> None:
    """Arithmetic and structural checks; raises InvariantViolation."""
    _core.validate_report_json(json.dumps(report))


def format_tables(report: Mapping[str, Any]) -> str:
    return _core.format_tables(json.dumps(report))
