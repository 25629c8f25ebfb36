"""Flat binary array files: little-endian float32/float64 blobs next to a JSON manifest.

All on-disk arrays in this package use this format so that datasets and
checkpoints stay language-neutral and bit-exact across save/load.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_f32(path: Path | str, arr: np.ndarray) -> None:
    np.asarray(arr, dtype="<f4").tofile(str(path))


def read_f32(path: Path | str, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.fromfile(str(path), dtype="<f4")
    expected = int(np.prod(shape)) if shape else arr.size
    if arr.size != expected:
        raise ValueError(f"{path}: expected {expected} float32 values, found {arr.size}")
    return arr.reshape(shape)


def write_f64(path: Path | str, arr: np.ndarray) -> None:
    np.asarray(arr, dtype="<f8").tofile(str(path))


def read_f64(path: Path | str, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.fromfile(str(path), dtype="<f8")
    expected = int(np.prod(shape)) if shape else arr.size
    if arr.size != expected:
        raise ValueError(f"{path}: expected {expected} float64 values, found {arr.size}")
    return arr.reshape(shape)


def write_json(path: Path | str, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def read_json(path: Path | str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
