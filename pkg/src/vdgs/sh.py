"""Real spherical harmonics color, degrees 0-3, with analytic derivatives.

Basis ordering and sign convention follow the usual Gaussian-splatting layout
(index ``l*l + l + m`` for ``m = -l..l``), so coefficients read from
third-party PLY clouds evaluate to the same colors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_unit_vectors

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_DEGREE = 3


@dataclass
class ShCoeffs:
    values: np.ndarray  # (3, (D+1)**2)
    degree: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        _check_coeffs(self.values[None], self.degree)


def _check_coeffs(coeffs, degree):
    if not 0 <= degree <= MAX_DEGREE:
        raise ValidationError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    if coeffs.ndim != 3 or coeffs.shape[1] != 3:
        raise ValidationError(f"SH coefficients must have shape (N, 3, K), got {coeffs.shape}")
    if coeffs.shape[2] < (degree + 1) ** 2:
        raise ValidationError(
            f"degree {degree} needs {(degree + 1) ** 2} coefficients per channel, got {coeffs.shape[2]}"
        )


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values, shape (N, (degree+1)**2)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(dir), shape (N, (degree+1)**2, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, -C1 * one, zero), (zero, zero, C1 * one), (-C1 * one, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2 * C2[4] * x, -2 * C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
            (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
            (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh_batch(coeffs: np.ndarray, dirs: np.ndarray, degree: int | None = None) -> np.ndarray:
    """Colors for (N, 3, K) coefficients viewed along (N, 3) unit directions.

    Only the first ``(degree+1)**2`` coefficients are used; ``degree`` defaults
    to the largest one the coefficient count supports.
    """
    if degree is None:
        degree = int(round(np.sqrt(coeffs.shape[-1]))) - 1
    _check_coeffs(coeffs, degree)
    k = (degree + 1) ** 2
    raw = np.einsum("nck,nk->nc", coeffs[:, :, :k], sh_basis(dirs, degree)) + 0.5
    return np.maximum(raw, 0.0)


def eval_sh_batch_backward(coeffs, dirs, grad_rgb, degree: int | None = None):
    """Returns (grad_coeffs with the shape of ``coeffs``, grad_dirs (N, 3))."""
    if degree is None:
        degree = int(round(np.sqrt(coeffs.shape[-1]))) - 1
    _check_coeffs(coeffs, degree)
    k = (degree + 1) ** 2
    basis = sh_basis(dirs, degree)
    used = coeffs[:, :, :k]
    raw = np.einsum("nck,nk->nc", used, basis) + 0.5
    g = np.where(raw > 0, grad_rgb, 0.0)
    grad_coeffs = np.zeros_like(coeffs)
    grad_coeffs[:, :, :k] = g[:, :, None] * basis[:, None, :]
    if degree == 0:
        grad_dirs = np.zeros_like(dirs)
    else:
        # sum_c g_c * sum_k coeff_ck * dB_k/ddir
        weighted = np.einsum("nc,nck->nk", g, used)
        grad_dirs = np.einsum("nk,nkj->nj", weighted, sh_basis_grad(dirs, degree))
    return grad_coeffs, grad_dirs


def _as_single(coeffs, degree):
    if isinstance(coeffs, ShCoeffs):
        return coeffs.values[None], coeffs.degree
    arr = np.asarray(coeffs, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"expected (3, K) coefficients, got shape {arr.shape}")
    arr = arr[None]
    if degree is None:
        degree = int(round(np.sqrt(arr.shape[-1]))) - 1
        if (degree + 1) ** 2 != arr.shape[-1]:
            raise ValidationError(f"{arr.shape[-1]} coefficients is not a square count")
    elif (degree + 1) ** 2 != arr.shape[-1]:
        raise ValidationError(f"degree {degree} needs {(degree + 1) ** 2} coefficients, got {arr.shape[-1]}")
    return arr, degree


def eval_sh(coeffs, direction, degree: int | None = None) -> np.ndarray:
    """RGB of one Gaussian. ``direction`` must be unit length to 1e-4."""
    arr, degree = _as_single(coeffs, degree)
    d = check_unit_vectors(np.asarray(direction, dtype=np.float64).reshape(1, 3))
    return eval_sh_batch(arr, d, degree)[0]


def eval_sh_backward(coeffs, direction, grad_rgb, degree: int | None = None):
    arr, degree = _as_single(coeffs, degree)
    d = check_unit_vectors(np.asarray(direction, dtype=np.float64).reshape(1, 3))
    gc, gd = eval_sh_batch_backward(arr, d, np.asarray(grad_rgb, dtype=np.float64).reshape(1, 3), degree)
    return gc[0], gd[0]


def rgb_to_dc(rgb):
    """DC coefficient that evaluates to ``rgb`` under the +0.5 offset convention."""
    return (np.asarray(rgb) - 0.5) / C0
