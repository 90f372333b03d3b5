"""Per-vertex blend weights from descriptor similarity.

Distances between local volume-change descriptors are gated with a softmax
over negated scaled distances (so similarity activates weight), diffused over
the mesh with one or more backward-Euler steps, and evaluated at arbitrary
points through linear FEM interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .bvh import TetBVH
from .errors import DimensionMismatch, SolverDiverged
from .renderer import blend_alpha_at_samples
from .tetmesh import DeformedVerts, TetCage, all_descriptors

SOLVE_RTOL = 1e-10


@dataclass
class DescriptorTable:
    """Per-expression, per-vertex descriptors for the K training deformations."""

    descriptors: np.ndarray  # (K, V, S)
    neighborhood_size: int

    @property
    def K(self) -> int:
        return self.descriptors.shape[0]


def build_descriptor_table(
    cage: TetCage, training_deformed: list[DeformedVerts], neighborhood_size: int
) -> DescriptorTable:
    if not training_deformed:
        raise ValueError("need at least one training deformation")
    table = np.stack([all_descriptors(cage, d, neighborhood_size) for d in training_deformed])
    return DescriptorTable(table, neighborhood_size)


def descriptor_distances(
    table: DescriptorTable, cage: TetCage, deformed: DeformedVerts, vertex_id: int
) -> np.ndarray:
    """Squared L2 distances of the vertex's descriptor to each training descriptor."""
    return all_descriptor_distances(table, cage, deformed)[vertex_id]


def all_descriptor_distances(
    table: DescriptorTable, cage: TetCage, deformed: DeformedVerts
) -> np.ndarray:
    """Distances for every vertex at once, shape (V, K)."""
    query = all_descriptors(cage, deformed, table.neighborhood_size)  # (V, S)
    if query.shape[1] != table.descriptors.shape[2]:
        raise DimensionMismatch(
            f"descriptor length {query.shape[1]} != table length {table.descriptors.shape[2]}"
        )
    diff = query[None, :, :] - table.descriptors  # (K, V, S)
    return np.einsum("kvs,kvs->vk", diff, diff)


def gate_weights(distances: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over negated scaled distances; smaller distance -> larger weight.

    Overflow-safe via max subtraction; exact distance ties produce equal
    weights. Accepts a (K,) vector or a (V, K) batch.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    logits = -tau * d
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if np.asarray(distances).ndim == 1 else out


def smooth_weights(
    weights: np.ndarray, laplacian: sparse.spmatrix, lambda_diff: float, iters: int
) -> np.ndarray:
    """Backward-Euler diffusion of the weight matrix over the mesh.

    Each iteration solves (I - lambda*L) A' = A column by column with a sparse
    direct factorization (deterministic); the relative residual must reach
    SOLVE_RTOL or SolverDiverged is raised. Rows are then clamped to [0, 1]
    and renormalized to keep the partition of unity. iters=0 returns the
    input unchanged.
    """
    a = np.asarray(weights, dtype=np.float64)
    if iters == 0 or lambda_diff == 0.0:
        return a.copy()
    n = a.shape[0]
    system = (sparse.identity(n, format="csc") - lambda_diff * laplacian.tocsc())
    lu = splu(system.tocsc())
    out = a.copy()
    for _ in range(iters):
        solved = lu.solve(out)
        resid = system @ solved - out
        denom = max(np.linalg.norm(out), 1e-300)
        if np.linalg.norm(resid) / denom > SOLVE_RTOL:
            raise SolverDiverged(
                f"diffusion solve residual {np.linalg.norm(resid) / denom:.3e} > {SOLVE_RTOL}"
            )
        out = solved
    out = np.clip(out, 0.0, 1.0)
    out /= np.maximum(out.sum(axis=1, keepdims=True), 1e-300)
    return out


@dataclass
class BlendState:
    """Blend-weight matrix for one queried deformation plus its gating params."""

    weights: np.ndarray  # (V, K), rows in [0,1] summing to 1
    unsmoothed: np.ndarray  # (V, K) before diffusion (weight inspection)
    tau: float
    lambda_diff: float
    smoothing_iters: int

    def __post_init__(self):
        row_sums = self.weights.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > 1e-6:
            raise ValueError("blend weights must satisfy the partition of unity")
        if self.weights.min() < -1e-12 or self.weights.max() > 1.0 + 1e-12:
            raise ValueError("blend weights must lie in [0, 1]")


def build_blend_state(
    cage: TetCage,
    table: DescriptorTable,
    deformed: DeformedVerts,
    tau: float,
    lambda_diff: float,
    iters: int,
    laplacian: sparse.spmatrix | None = None,
) -> BlendState:
    """Distances -> softmax gate -> diffusion, for a queried deformation."""
    from .tetmesh import assemble_laplacian

    dist = all_descriptor_distances(table, cage, deformed)
    raw = gate_weights(dist, tau)
    if iters > 0 and lambda_diff != 0.0:
        if laplacian is None:
            laplacian = assemble_laplacian(cage)
        smoothed = smooth_weights(raw, laplacian, lambda_diff, iters)
    else:
        smoothed = raw.copy()
    return BlendState(smoothed, raw, tau, lambda_diff, iters)


def blendfield_at_point(
    cage: TetCage, bvh: TetBVH, state: BlendState, point: np.ndarray
):
    """Blend vector at one deformed-space point, or None on Miss."""
    tet_ids, bary = bvh.locate(np.asarray(point, dtype=np.float64)[None, :])
    if tet_ids[0] < 0:
        return None
    return blend_alpha_at_samples(state.weights, cage, tet_ids, bary)[0]
