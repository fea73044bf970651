"""Input validation helpers shared across modules."""
from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised for malformed inputs (bad shapes, degrees, ranges)."""


def check_array(x, name, shape=None, ndim=None, finite=False, dtype=None) -> np.ndarray:
    """Coerce ``x`` to an array and check its shape.

    ``shape`` may contain ``None`` wildcards.
    """
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim} dimensions, got shape {arr.shape}")
    if shape is not None:
        if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
            raise ValidationError(f"{name}: expected shape {shape}, got {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_image(img, name="image") -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValidationError(f"{name}: expected HxW or HxWxC array, got shape {arr.shape}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def check_unit_vectors(d, name="dir", tol=1e-4) -> np.ndarray:
    d = np.asarray(d)
    if d.shape[-1] != 3:
        raise ValidationError(f"{name}: last axis must have length 3, got shape {d.shape}")
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValidationError(f"{name}: expected unit vectors (|norm - 1| <= {tol})")
    return d


class NonFiniteError(FloatingPointError):
    """A parameter or loss became NaN/inf; the message names the offender."""
