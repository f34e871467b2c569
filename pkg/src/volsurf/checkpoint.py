"""Versioned JSON parameter dump shared by every estimator."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .autodiff import DTYPE
from .estimators import ESTIMATORS, PINNVolatilityRegressor
from .exceptions import DataError, UnsupportedVersionError

CHECKPOINT_FORMAT = "volsurf-checkpoint"
CHECKPOINT_VERSION = 1


def _kind_of(estimator) -> str:
    for kind, cls in ESTIMATORS.items():
        if type(estimator) is cls:
            return kind
    raise DataError(f"no checkpoint kind registered for {type(estimator).__name__}")


def checkpoint_dict(estimator) -> dict:
    """Plain-JSON dump: kind, constructor params, fitted metadata and named tensors."""
    state = estimator.module_.state_dict()
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": _kind_of(estimator),
        "params": estimator.get_params(),
        "fitted": estimator._fitted_meta(),
        "tensors": [
            {"name": name, "shape": list(t.shape), "values": t.detach().reshape(-1).tolist()}
            for name, t in state.items()
        ],
    }


def save_checkpoint(path, estimator) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(checkpoint_dict(estimator)))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def estimator_from_dict(payload: dict):
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"not a checkpoint (format={payload.get('format')!r})")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {payload.get('version')} is not supported")
    cls = ESTIMATORS.get(payload["kind"])
    if cls is None:
        raise DataError(f"unknown checkpoint kind {payload['kind']!r}")
    estimator = cls(**payload["params"])
    state = {}
    for entry in payload["tensors"]:
        values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        state[entry["name"]] = torch.as_tensor(values, dtype=DTYPE)
    estimator._restore(payload["fitted"], state)
    return estimator


def load_checkpoint(path):
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed checkpoint JSON ({exc})") from exc
    return estimator_from_dict(payload)


__all__ = [
    "CHECKPOINT_FORMAT", "CHECKPOINT_VERSION", "checkpoint_dict", "save_checkpoint",
    "estimator_from_dict", "load_checkpoint", "PINNVolatilityRegressor",
]
