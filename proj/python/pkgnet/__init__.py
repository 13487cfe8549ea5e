"""Python bindings for pkgnet."""

import json

import torch  # noqa: F401  loads libtorch before the extension

from ._core import (
    ConfigError,
    PkgnetError,
    aggregate_frame,
    auroc,
    combined_score,
    feature_inconsistency_loss,
    gradient_loss,
    prediction_loss,
    smooth_series,
    teacher_taps,
)
from . import _core


def default_config():
    return json.loads(_core.default_config())


def load_config(path):
    return json.loads(_core.load_config(str(path)))


def validate_config(config):
    return json.loads(_core.validate_config(json.dumps(config)))


def synth_data(config, out_dir):
    _core.synth_data(json.dumps(config), str(out_dir))


def train(config, run_dir):
    return _core.train(json.dumps(config), str(run_dir))


def calibrate(run_dir):
    stats, warnings = _core.calibrate(str(run_dir))
    return json.loads(stats), warnings


def score(run_dir):
    _core.score(str(run_dir))


def evaluate(run_dir, smoothing=True):
    return _core.evaluate(str(run_dir), smoothing)


__all__ = [
    "ConfigError",
    "PkgnetError",
    "aggregate_frame",
    "auroc",
    "calibrate",
    "combined_score",
    "default_config",
    "evaluate",
    "feature_inconsistency_loss",
    "gradient_loss",
    "load_config",
    "prediction_loss",
    "score",
    "smooth_series",
    "synth_data",
    "teacher_taps",
    "train",
    "validate_config",
]
