"""Multiresolution hash-grid encoding of 3D positions."""
from __future__ import annotations

import numpy as np

from ._validation import ValidationError, check_array

PRIMES = (1, 2654435761, 805459861)

# (8, 3) corner offsets; bit j of the corner index selects +1 on axis j.
_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


def level_resolutions(levels: int, base_resolution: int, max_resolution: int) -> np.ndarray:
    if levels == 1:
        return np.array([base_resolution], dtype=np.int64)
    growth = np.exp((np.log(max_resolution) - np.log(base_resolution)) / (levels - 1))
    # the epsilon keeps exact endpoints like 16 * 32 from flooring to 511
    res = np.floor(base_resolution * growth ** np.arange(levels) * (1 + 1e-12) + 1e-9)
    return res.astype(np.int64)


def spatial_hash(vertices: np.ndarray, table_size: int) -> np.ndarray:
    """XOR-of-primes hash of integer (..., 3) vertex coordinates into [0, table_size)."""
    v = vertices.astype(np.uint64)
    h = v[..., 0] * np.uint64(PRIMES[0])
    h ^= v[..., 1] * np.uint64(PRIMES[1])
    h ^= v[..., 2] * np.uint64(PRIMES[2])
    return (h % np.uint64(table_size)).astype(np.int64)


class HashGrid:
    """L levels of trainable F-dim features indexed by a spatial hash.

    Positions are normalized into the grid's ``aabb`` and clamped to it; level
    ``l`` places vertices on the integer lattice of ``resolutions[l]`` cells
    per axis.
    """

    def __init__(
        self,
        aabb,
        levels: int = 12,
        base_resolution: int = 16,
        max_resolution: int = 512,
        table_size: int = 2**14,
        feature_dim: int = 2,
        tables: np.ndarray | None = None,
        seed: int | None = 0,
        init_scale: float = 1e-4,
        dtype=np.float64,
    ):
        self.aabb = check_array(aabb, "aabb", shape=(2, 3), dtype=np.float64)
        if np.any(self.aabb[1] <= self.aabb[0]):
            raise ValidationError("aabb must have hi > lo on every axis")
        self.levels = levels
        self.base_resolution = base_resolution
        self.max_resolution = max_resolution
        self.table_size = table_size
        self.feature_dim = feature_dim
        self.resolutions = level_resolutions(levels, base_resolution, max_resolution)
        if tables is None:
            rng = np.random.default_rng(seed)
            tables = rng.uniform(-init_scale, init_scale, size=(levels, table_size, feature_dim))
        self.tables = check_array(tables, "tables", shape=(levels, table_size, feature_dim)).astype(dtype)
        self.n_evals = 0

    @property
    def output_dim(self) -> int:
        return self.levels * self.feature_dim

    def normalize(self, positions: np.ndarray) -> np.ndarray:
        lo, hi = self.aabb
        return np.clip((positions - lo) / (hi - lo), 0.0, 1.0)

    def lookup(self, positions: np.ndarray):
        """Hash indices (N, L, 8) and trilinear weights (N, L, 8) for (N, 3) positions."""
        positions = check_array(positions, "positions", shape=(None, 3))
        x = self.normalize(positions.astype(np.float64))
        scaled = x[:, None, :] * self.resolutions[None, :, None]  # (N, L, 3)
        base = np.minimum(np.floor(scaled), self.resolutions[None, :, None] - 1)
        frac = scaled - base
        verts = base.astype(np.int64)[:, :, None, :] + _CORNERS  # (N, L, 8, 3)
        idx = spatial_hash(verts, self.table_size)
        w_axis = np.where(_CORNERS == 1, frac[:, :, None, :], 1.0 - frac[:, :, None, :])
        weights = w_axis.prod(axis=-1)
        return idx, weights

    def encode(self, positions: np.ndarray) -> np.ndarray:
        """(N, 3) positions -> (N, L*F) features, levels concatenated coarse to fine."""
        self.n_evals += 1
        idx, w = self.lookup(positions)
        level = np.arange(self.levels)[None, :, None]
        feats = self.tables[level, idx]  # (N, L, 8, F)
        out = np.einsum("nlc,nlcf->nlf", w.astype(self.tables.dtype), feats)
        return out.reshape(len(out), self.output_dim)

    def encode_backward(self, positions: np.ndarray, grad_features: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the tables, same shape as ``self.tables``.

        Scatter is a sequential bincount, so results are bit-reproducible.
        No gradient is propagated to ``positions``.
        """
        idx, w = self.lookup(positions)
        g = np.asarray(grad_features).reshape(len(idx), self.levels, 1, self.feature_dim)
        contrib = w[..., None] * g  # (N, L, 8, F)
        flat_idx = (np.arange(self.levels)[None, :, None] * self.table_size + idx).reshape(-1)
        size = self.levels * self.table_size
        out = np.empty((size, self.feature_dim), dtype=self.tables.dtype)
        for f in range(self.feature_dim):
            out[:, f] = np.bincount(flat_idx, weights=contrib[..., f].reshape(-1), minlength=size)
        return out.reshape(self.tables.shape)

    def copy(self) -> "HashGrid":
        return HashGrid(
            self.aabb.copy(), self.levels, self.base_resolution, self.max_resolution,
            self.table_size, self.feature_dim, tables=self.tables.copy(), dtype=self.tables.dtype,
        )

    def astype(self, dtype) -> "HashGrid":
        g = self.copy()
        g.tables = g.tables.astype(dtype)
        return g


def encode(grid: HashGrid, position) -> np.ndarray:
    return grid.encode(np.asarray(position, dtype=np.float64).reshape(1, 3))[0]


def encode_backward(grid: HashGrid, position, grad_features) -> np.ndarray:
    return grid.encode_backward(np.asarray(position, dtype=np.float64).reshape(1, 3), grad_features)
