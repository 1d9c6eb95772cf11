"""Input validation helpers shared by the public API surfaces."""

from __future__ import annotations

import numpy as np


def check_array(x, name: str, shape=None, dtype=None, finite: bool = True) -> np.ndarray:
    """Coerce ``x`` to an ndarray and validate shape/finiteness.

    ``shape`` entries of ``None`` match any extent, e.g. ``(None, 3)``.
    """
    arr = np.asarray(x, dtype=dtype)
    if shape is not None:
        if arr.ndim != len(shape):
            raise ValueError(f"{name}: expected {len(shape)}-d array, got shape {arr.shape}")
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise ValueError(f"{name}: expected axis {axis} of size {want}, got shape {arr.shape}")
    if finite and arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_positions(x, name: str = "positions") -> np.ndarray:
    return check_array(x, name, shape=(None, 3), dtype=np.float64)


def check_unit_normals(x, name: str = "normals", tol: float = 1e-4) -> np.ndarray:
    arr = check_array(x, name, shape=(None, 3), dtype=np.float64)
    if arr.size:
        norms = np.linalg.norm(arr, axis=1)
        bad = np.abs(norms - 1.0) > tol
        if np.any(bad):
            raise ValueError(f"{name}: {int(bad.sum())} vectors deviate from unit length by more than {tol}")
    return arr


def check_scalar(x, name: str, minimum=None, strict: bool = False) -> float:
    v = float(x)
    if not np.isfinite(v):
        raise ValueError(f"{name}: must be finite, got {v}")
    if minimum is not None:
        if strict and v <= minimum:
            raise ValueError(f"{name}: must be > {minimum}, got {v}")
        if not strict and v < minimum:
            raise ValueError(f"{name}: must be >= {minimum}, got {v}")
    return v
