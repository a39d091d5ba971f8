# SPDX-License-Identifier: Apache-2.0
"""Multi-prompt person re-identification."""

import json

from ._mpreid import (
    REPORT_SCHEMA_VERSION,
    ConfigError,
    DimensionError,
    EvaluationError,
    InputError,
    MpreidError,
    NumericError,
    TokenSequence,
    Vocabulary,
    __version__,
    build_prompts,
    config_hash,
    default_config,
    evaluate,
    generate_dataset,
    rank_gallery,
)
from ._mpreid import run_experiment as _run_experiment


def run_experiment(config=None, overrides=()):
    """Train and evaluate one run; config is a dict, overrides "key=value" strings."""
    text = "" if config is None else json.dumps(config)
    out = _run_experiment(text, list(overrides))
    return {"report": json.loads(out["report"]), "loss": out["loss"]}


__all__ = [
    "REPORT_SCHEMA_VERSION",
    "ConfigError",
    "DimensionError",
    "EvaluationError",
    "InputError",
    "MpreidError",
    "NumericError",
    "TokenSequence",
    "Vocabulary",
    "__version__",
    "build_prompts",
    "config_hash",
    "default_config",
    "evaluate",
    "generate_dataset",
    "rank_gallery",
    "run_experiment",
]
