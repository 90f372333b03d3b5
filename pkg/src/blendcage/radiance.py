"""Canonical-space radiance model: explicit voxel grids with closed-form gradients.

One density grid (softplus-activated), one template color grid (sigmoid) and K
signed residual color grids share the same bounding box and resolution, so a
single trilinear handle (corner indices + weights) serves every grid for both
sampling and gradient scatter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def softplus(x: np.ndarray) -> np.ndarray:
    """Overflow-safe ln(1 + e^x)."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class VoxelGrid:
    """Dense node-centered grid over an axis-aligned box.

    Nodes span the box inclusively: node (i,j,k) sits at
    bbox_min + (i,j,k) * (bbox_max - bbox_min) / (resolution - 1).
    """

    resolution: tuple[int, int, int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    values: np.ndarray  # (nx, ny, nz, c) raw parameters

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        nx, ny, nz = self.resolution
        if min(nx, ny, nz) < 2:
            raise ValueError("resolution must be >= 2 per axis")
        if not np.all(self.bbox_max > self.bbox_min):
            raise ValueError("degenerate bbox")
        if self.values.shape[:3] != (nx, ny, nz):
            raise ValueError(f"values shape {self.values.shape} != resolution {self.resolution}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    @property
    def num_nodes(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    def flat_values(self) -> np.ndarray:
        return self.values.reshape(self.num_nodes, self.channels)

    @classmethod
    def constant(cls, resolution, bbox_min, bbox_max, channels: int, value: float) -> "VoxelGrid":
        nx, ny, nz = resolution
        vals = np.full((nx, ny, nz, channels), value, dtype=np.float64)
        return cls(tuple(resolution), bbox_min, bbox_max, vals)


def trilinear_handle(grid: VoxelGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Corner indices and weights for trilinear sampling at the given points.

    Points outside the bbox clamp to the boundary. Returns flat corner node
    indices (N, 8) and weights (N, 8); weights are exactly the gradient of the
    sampled value w.r.t. the corner values.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    nx, ny, nz = grid.resolution
    res = np.array([nx, ny, nz], dtype=np.float64)
    u = (points - grid.bbox_min) / (grid.bbox_max - grid.bbox_min) * (res - 1.0)
    u = np.clip(u, 0.0, res - 1.0)
    i0 = np.minimum(u.astype(np.int64), (res - 2.0).astype(np.int64))
    f = u - i0
    wx0, wy0, wz0 = (1.0 - f[:, 0]), (1.0 - f[:, 1]), (1.0 - f[:, 2])
    wx1, wy1, wz1 = f[:, 0], f[:, 1], f[:, 2]

    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    idx = np.empty((len(points), 8), dtype=np.int64)
    w = np.empty((len(points), 8), dtype=np.float64)
    k = 0
    for dx, wxs in ((0, wx0), (1, wx1)):
        for dy, wys in ((0, wy0), (1, wy1)):
            for dz, wzs in ((0, wz0), (1, wz1)):
                idx[:, k] = base + (dx * ny + dy) * nz + dz
                w[:, k] = wxs * wys * wzs
                k += 1
    return idx, w


def gather(flat_values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Trilinear interpolation from a handle: (N, c) raw values."""
    return np.einsum("nkc,nk->nc", flat_values[idx], w)


def scatter(num_nodes: int, idx: np.ndarray, w: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Accumulate per-point gradients back onto grid nodes, (num_nodes, c)."""
    grad = np.atleast_2d(grad)
    c = grad.shape[1]
    out = np.empty((num_nodes, c), dtype=np.float64)
    flat_idx = idx.ravel()
    for ch in range(c):
        contrib = (w * grad[:, ch : ch + 1]).ravel()
        out[:, ch] = np.bincount(flat_idx, weights=contrib, minlength=num_nodes)
    return out


def sample_trilinear(grid: VoxelGrid, point: np.ndarray) -> np.ndarray:
    """Raw trilinear sample; accepts a single point or a batch."""
    single = np.asarray(point).ndim == 1
    idx, w = trilinear_handle(grid, point)
    vals = gather(grid.flat_values(), idx, w)
    return vals[0] if single else vals


@dataclass
class RadianceModel:
    density: VoxelGrid  # 1 channel, raw; softplus -> sigma
    template_color: VoxelGrid  # 3 channels, raw; sigmoid -> base color
    residuals: list[VoxelGrid] = field(default_factory=list)  # 3 channels, signed

    def __post_init__(self):
        grids = [self.density, self.template_color, *self.residuals]
        for g in grids[1:]:
            if g.resolution != grids[0].resolution:
                raise ValueError("all grids must share one resolution")
            if not (np.allclose(g.bbox_min, grids[0].bbox_min) and np.allclose(g.bbox_max, grids[0].bbox_max)):
                raise ValueError("all grids must share one bbox")
        if len(self.residuals) < 1:
            raise ValueError("need K >= 1 residual grids")

    @property
    def K(self) -> int:
        return len(self.residuals)


def init_model(resolution, bbox_min, bbox_max, K: int, seed: int = 0, noise: float = 0.0) -> RadianceModel:
    """Fresh model: low initial opacity (raw density -2), mid-gray template, zero residuals.

    `noise` optionally perturbs the raw grids (seeded); default off keeps the
    init exactly constant and bit-reproducible.
    """
    density = VoxelGrid.constant(resolution, bbox_min, bbox_max, 1, -2.0)
    template = VoxelGrid.constant(resolution, bbox_min, bbox_max, 3, 0.0)
    residuals = [VoxelGrid.constant(resolution, bbox_min, bbox_max, 3, 0.0) for _ in range(K)]
    if noise > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1E7D]))
        for g in [density, template, *residuals]:
            g.values += noise * rng.standard_normal(g.values.shape)
    return RadianceModel(density, template, residuals)


def _split_miss(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    miss = ~np.isfinite(points).all(axis=1)
    safe = np.where(miss[:, None], 0.0, points)
    return safe, miss


def density_at(model: RadianceModel, points: np.ndarray) -> np.ndarray:
    """Activated density; Miss rows (NaN coordinates) give exactly 0."""
    safe, miss = _split_miss(points)
    idx, w = trilinear_handle(model.density, safe)
    raw = gather(model.density.flat_values(), idx, w)[:, 0]
    sig = softplus(raw)
    sig[miss] = 0.0
    return sig


def color_at(model: RadianceModel, points: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Blended radiance: clamp(sigmoid(template) + sum_k alpha_k * residual_k, 0, 1)."""
    safe, miss = _split_miss(points)
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    if alpha.shape != (len(safe), model.K):
        raise ValueError(f"alpha must be (N, {model.K})")
    idx, w = trilinear_handle(model.template_color, safe)
    color = sigmoid(gather(model.template_color.flat_values(), idx, w))
    for k, res in enumerate(model.residuals):
        color += alpha[:, k : k + 1] * gather(res.flat_values(), idx, w)
    color[miss] = 0.0
    return np.clip(color, 0.0, 1.0)
