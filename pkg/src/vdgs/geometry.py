"""Scene primitives: Gaussians, clouds, cameras and covariance construction.

Clouds are stored struct-of-arrays so that every downstream stage (projection,
SH, hash encoding, the modulation network) can run vectorized over Gaussians.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import NonFiniteError, ValidationError, check_array


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class Gaussian3D:
    """One anisotropic Gaussian.

    ``sh_coeffs`` has shape ``(3, (D+1)**2)``: one row per color channel.
    """

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        return covariance(self)


@dataclass
class GaussianCloud:
    """An ordered set of Gaussians sharing one SH degree."""

    means: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4), (w, x, y, z), unnormalized
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 3, (D+1)**2)
    sh_degree: int = 0

    def __post_init__(self):
        if not 0 <= self.sh_degree <= 3:
            raise ValidationError(f"sh_degree must be in [0, 3], got {self.sh_degree}")
        n = len(self.means)
        k = sh_coeff_count(self.sh_degree)
        check_array(self.means, "means", shape=(n, 3))
        check_array(self.log_scales, "log_scales", shape=(n, 3))
        check_array(self.rotations, "rotations", shape=(n, 4))
        check_array(self.opacity_logits, "opacity_logits", shape=(n,))
        check_array(self.sh, "sh", shape=(n, 3, k))

    PARAM_NAMES = ("means", "log_scales", "rotations", "opacity_logits", "sh")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh[i].copy(),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int) -> "GaussianCloud":
        gaussians = list(gaussians)
        k = sh_coeff_count(sh_degree)
        if not gaussians:
            return cls.empty(sh_degree)
        return cls(
            means=np.stack([np.asarray(g.mean, dtype=np.float64) for g in gaussians]),
            log_scales=np.stack([np.asarray(g.log_scale, dtype=np.float64) for g in gaussians]),
            rotations=np.stack([np.asarray(g.rotation, dtype=np.float64) for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            sh=np.stack([np.asarray(g.sh_coeffs, dtype=np.float64).reshape(3, k) for g in gaussians]),
            sh_degree=sh_degree,
        )

    @classmethod
    def empty(cls, sh_degree: int = 0, dtype=np.float64) -> "GaussianCloud":
        k = sh_coeff_count(sh_degree)
        return cls(
            means=np.zeros((0, 3), dtype),
            log_scales=np.zeros((0, 3), dtype),
            rotations=np.zeros((0, 4), dtype),
            opacity_logits=np.zeros((0,), dtype),
            sh=np.zeros((0, 3, k), dtype),
            sh_degree=sh_degree,
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            **{k: np.array(v, dtype=dtype) for k, v in self.params().items()},
            sh_degree=self.sh_degree,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()}, sh_degree=self.sh_degree)

    def select(self, index) -> "GaussianCloud":
        """Subset (or reorder, or repeat) Gaussians by integer or boolean index."""
        return GaussianCloud(**{k: v[index].copy() for k, v in self.params().items()}, sh_degree=self.sh_degree)

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if other.sh_degree != self.sh_degree:
            raise ValidationError("cannot concatenate clouds with different SH degrees")
        return GaussianCloud(
            **{k: np.concatenate([v, getattr(other, k)]) for k, v in self.params().items()},
            sh_degree=self.sh_degree,
        )

    def check_finite(self):
        for name, arr in self.params().items():
            flat = arr.reshape(len(self), -1)
            bad = ~np.isfinite(flat).all(axis=1)
            if bad.any():
                raise NonFiniteError(
                    f"non-finite {name} for Gaussian index {int(np.flatnonzero(bad)[0])}"
                )


@dataclass
class Camera:
    """Pinhole camera. The camera frame is x right, y down, z forward."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4):
            raise ValidationError("world_to_camera must be 4x4")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValidationError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image size must be positive")
        r = self.rotation
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-5:
            raise ValidationError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Optical axis (+z of the camera frame) in world coordinates."""
        return self.rotation[2].copy()

    @classmethod
    def look_at(cls, eye, target, width, height, fov_x, up=(0.0, 0.0, 1.0), **kw) -> "Camera":
        """Camera at ``eye`` looking at ``target``; ``fov_x`` is in radians."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        if abs(fwd @ up) > 1 - 1e-9:
            up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        f = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(width, height, f, f, width / 2.0, height / 2.0, w2c, **kw)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions (w, x, y, z), normalized first."""
    q = np.asarray(q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


def quat_to_rotmat_backward(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the unnormalized quaternion given dL/dR."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = grad_r.reshape(grad_r.shape[:-2] + (9,))
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = np.moveaxis(g, -1, 0)
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def covariance_from_params(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Batched R diag(s)^2 R^T for (N, 3) log-scales and (N, 4) quaternions."""
    m = quat_to_rotmat(rotations) * np.exp(log_scales)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def covariance_backward(log_scales, rotations, grad_cov):
    """Gradients of a scalar w.r.t. log-scales and quaternions given dL/dSigma."""
    r = quat_to_rotmat(rotations)
    s = np.exp(log_scales)
    m = r * s[..., None, :]
    g = grad_cov + np.swapaxes(grad_cov, -1, -2)
    grad_m = g @ m
    grad_s = np.sum(grad_m * r, axis=-2)
    grad_r = grad_m * s[..., None, :]
    return grad_s * s, quat_to_rotmat_backward(rotations, grad_r)


def covariance(g: Gaussian3D) -> np.ndarray:
    """Symmetric positive definite covariance of a single Gaussian."""
    cov = covariance_from_params(np.asarray(g.log_scale)[None], np.asarray(g.rotation)[None])[0]
    return 0.5 * (cov + cov.T)


def viewing_directions(cam: Camera, means: np.ndarray) -> np.ndarray:
    """Unit vectors from the camera center to each mean, world frame.

    A mean that coincides with the camera center gets the camera's forward axis.
    """
    v = means - cam.center.astype(means.dtype)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    degenerate = n[:, 0] <= np.finfo(means.dtype).tiny
    safe = np.where(n > 0, n, 1)
    d = v / safe
    if degenerate.any():
        d[degenerate] = cam.forward.astype(means.dtype)
    return d


def viewing_directions_backward(cam: Camera, means, grad_dirs):
    v = means - cam.center.astype(means.dtype)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(n > 0, n, 1)
    d = v / safe
    grad = (grad_dirs - d * np.sum(d * grad_dirs, axis=-1, keepdims=True)) / safe
    return np.where(n > 0, grad, 0)


def viewing_direction(cam: Camera, g: Gaussian3D) -> np.ndarray:
    return viewing_directions(cam, np.asarray(g.mean, dtype=np.float64)[None])[0]


def scene_aabb(points: np.ndarray, pad: float = 0.1) -> np.ndarray:
    """Bounding box of ``points`` expanded by ``pad`` of its size on every side.

    Returns a (2, 3) array ``[lo, hi]``; degenerate axes get a unit-free floor.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValidationError("cannot compute a bounding box of zero points")
    lo, hi = points.min(axis=0), points.max(axis=0)
    size = np.maximum(hi - lo, 1e-3 * max(float(np.max(hi - lo)), 1.0))
    center = 0.5 * (lo + hi)
    half = 0.5 * size * (1.0 + 2.0 * pad)
    return np.stack([center - half, center + half])
