"""Tetrahedral cage geometry.

Edge matrices, deformation-gradient volume changes, vertex/tet adjacency,
BFS tet neighborhoods, local volume-change descriptors, linear-FEM
interpolation and the mesh Laplacian. All descriptor and Laplacian
construction happens on the rest pose; deformations only supply new vertex
positions in the same index order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import DegenerateTet, DimensionMismatch

# Rest tets with |signed volume| below this are rejected at load.
DEGENERATE_VOLUME_EPS = 1e-12

MESH_FORMAT_HEADER = "tetcage v1"


def edge_matrix(tet: np.ndarray) -> np.ndarray:
    """Edge matrix of a single tet: columns [v3-v0, v2-v0, v1-v0]."""
    tet = np.asarray(tet, dtype=np.float64)
    return np.stack([tet[3] - tet[0], tet[2] - tet[0], tet[1] - tet[0]], axis=1)


def edge_matrices(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Edge matrices for every tet, shape (T, 3, 3)."""
    corners = positions[tets]  # (T, 4, 3)
    d = np.empty((len(tets), 3, 3), dtype=np.float64)
    d[:, :, 0] = corners[:, 3] - corners[:, 0]
    d[:, :, 1] = corners[:, 2] - corners[:, 0]
    d[:, :, 2] = corners[:, 1] - corners[:, 0]
    return d


def signed_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed tet volumes det(edge_matrix)/6 under the edge-matrix convention."""
    return np.linalg.det(edge_matrices(positions, tets)) / 6.0


def volume_change(rest_tet: np.ndarray, deformed_tet: np.ndarray) -> float:
    """Volume-change ratio det(D Dbar^-1) of one tet between rest and deformed pose.

    Equals (signed deformed volume) / (signed rest volume); computed as a
    determinant ratio, which is the same quantity without the explicit inverse.
    """
    det_rest = float(np.linalg.det(edge_matrix(rest_tet)))
    if abs(det_rest) / 6.0 < DEGENERATE_VOLUME_EPS:
        raise DegenerateTet(f"rest tet volume {det_rest / 6.0:.3e} below threshold")
    det_def = float(np.linalg.det(edge_matrix(deformed_tet)))
    return det_def / det_rest


@dataclass
class DeformedVerts:
    """Deformed vertex positions for one expression code.

    Positions are in the same order/length as the cage's rest vertices.
    """

    expression_code: float | np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DimensionMismatch(f"positions must be (V, 3), got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("deformed positions contain non-finite values")


class TetCage:
    """Rest-pose tetrahedral mesh with prebuilt adjacency.

    Construction validates index ranges, positive rest volumes under the
    edge-matrix convention, and face-connectivity of the whole mesh.
    Immutable after construction; safe for concurrent reads.
    """

    def __init__(self, rest_vertices: np.ndarray, tets: np.ndarray):
        self.rest_vertices = np.ascontiguousarray(rest_vertices, dtype=np.float64)
        self.tets = np.ascontiguousarray(tets, dtype=np.int64)
        if self.rest_vertices.ndim != 2 or self.rest_vertices.shape[1] != 3:
            raise ValueError(f"rest_vertices must be (V, 3), got {self.rest_vertices.shape}")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise ValueError(f"tets must be (T, 4), got {self.tets.shape}")
        if self.tets.min(initial=0) < 0 or self.tets.max(initial=-1) >= len(self.rest_vertices):
            raise ValueError("tet vertex index out of range")

        vols = signed_volumes(self.rest_vertices, self.tets)
        bad = np.nonzero(vols <= DEGENERATE_VOLUME_EPS)[0]
        if len(bad):
            raise DegenerateTet(
                f"{len(bad)} tets with non-positive/degenerate rest volume "
                f"(first: tet {bad[0]}, volume {vols[bad[0]]:.3e})"
            )
        self.rest_volumes = vols

        self.vertex_tet_adjacency = self._build_vertex_tets()
        self.tet_tet_adjacency = self._build_tet_neighbors()
        self._check_connected()
        self._neighborhood_cache: dict[int, np.ndarray] = {}

    @property
    def num_vertices(self) -> int:
        return len(self.rest_vertices)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    def _build_vertex_tets(self) -> list[np.ndarray]:
        tet_ids = np.repeat(np.arange(self.num_tets, dtype=np.int64), 4)
        verts = self.tets.ravel()
        order = np.argsort(verts, kind="stable")
        verts_sorted = verts[order]
        tet_sorted = tet_ids[order]
        starts = np.searchsorted(verts_sorted, np.arange(self.num_vertices + 1))
        return [np.sort(tet_sorted[starts[v] : starts[v + 1]]) for v in range(self.num_vertices)]

    def _build_tet_neighbors(self) -> np.ndarray:
        # Four faces per tet, keyed by their sorted vertex triple. An interior
        # face is shared by exactly two tets.
        t = self.tets
        faces = np.concatenate(
            [t[:, [1, 2, 3]], t[:, [0, 2, 3]], t[:, [0, 1, 3]], t[:, [0, 1, 2]]], axis=0
        )
        faces = np.sort(faces, axis=1)
        owner = np.tile(np.arange(self.num_tets, dtype=np.int64), 4)
        order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))
        faces = faces[order]
        owner = owner[order]
        same = np.all(faces[1:] == faces[:-1], axis=1)
        neighbors = np.full((self.num_tets, 4), -1, dtype=np.int64)
        counts = np.zeros(self.num_tets, dtype=np.int64)
        for i in np.nonzero(same)[0]:
            a, b = owner[i], owner[i + 1]
            neighbors[a, counts[a]] = b
            neighbors[b, counts[b]] = a
            counts[a] += 1
            counts[b] += 1
        neighbors_sorted = np.full_like(neighbors, -1)
        for i in range(self.num_tets):
            row = np.sort(neighbors[i, : counts[i]])
            neighbors_sorted[i, : len(row)] = row
        return neighbors_sorted

    def _check_connected(self):
        seen = np.zeros(self.num_tets, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            t = stack.pop()
            for n in self.tet_tet_adjacency[t]:
                if n >= 0 and not seen[n]:
                    seen[n] = True
                    stack.append(int(n))
        if not seen.all():
            raise ValueError("cage is not a single face-connected component")

    def check_deformed(self, deformed: DeformedVerts):
        if len(deformed.positions) != self.num_vertices:
            raise DimensionMismatch(
                f"deformed has {len(deformed.positions)} vertices, cage has {self.num_vertices}"
            )

    def neighborhoods(self, size: int) -> np.ndarray:
        """Per-vertex tet neighborhoods as an int array (V, size), padded."""
        if size not in self._neighborhood_cache:
            table = np.empty((self.num_vertices, size), dtype=np.int64)
            for v in range(self.num_vertices):
                table[v] = tet_neighborhood(self, v, size)
            self._neighborhood_cache[size] = table
        return self._neighborhood_cache[size]

    def save(self, path: str | Path):
        lines = [MESH_FORMAT_HEADER, str(self.num_vertices), str(self.num_tets)]
        lines += ["%.17g %.17g %.17g" % tuple(v) for v in self.rest_vertices]
        lines += ["%d %d %d %d" % tuple(t) for t in self.tets]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TetCage":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0].strip() != MESH_FORMAT_HEADER:
            raise ValueError(f"not a '{MESH_FORMAT_HEADER}' file: {path}")
        nv, nt = int(lines[1]), int(lines[2])
        verts = np.array([[float(x) for x in ln.split()] for ln in lines[3 : 3 + nv]])
        tets = np.array(
            [[int(x) for x in ln.split()] for ln in lines[3 + nv : 3 + nv + nt]], dtype=np.int64
        )
        return cls(verts, tets)


def volume_changes(cage: TetCage, deformed: DeformedVerts) -> np.ndarray:
    """Volume-change ratio of every tet for one deformed state, shape (T,)."""
    cage.check_deformed(deformed)
    det_def = np.linalg.det(edge_matrices(deformed.positions, cage.tets))
    return det_def / (6.0 * cage.rest_volumes)


def tet_neighborhood(cage: TetCage, vertex_id: int, size: int) -> np.ndarray:
    """Deterministic tet neighborhood of a vertex.

    BFS over tet-face adjacency seeded with the vertex's incident tets,
    ordered by (BFS depth, tet index) and truncated to `size`; if fewer tets
    are reachable the list is padded by repeating the last entry so that
    descriptors keep a fixed length.
    """
    if size < 1:
        raise ValueError("neighborhood size must be >= 1")
    seeds = cage.vertex_tet_adjacency[vertex_id]
    if len(seeds) == 0:
        raise ValueError(f"vertex {vertex_id} has no incident tets")
    out: list[int] = []
    visited = set()
    layer = [int(t) for t in seeds]
    while layer and len(out) < size:
        visited.update(layer)
        out.extend(layer)
        nxt = set()
        for t in layer:
            for n in cage.tet_tet_adjacency[t]:
                if n >= 0 and n not in visited:
                    nxt.add(int(n))
        layer = sorted(nxt)
    out = out[:size]
    if len(out) < size:
        out += [out[-1]] * (size - len(out))
    return np.array(out, dtype=np.int64)


def local_descriptor(
    cage: TetCage, deformed: DeformedVerts, vertex_id: int, size: int
) -> np.ndarray:
    """Concatenated volume changes over the vertex's tet neighborhood."""
    vc = volume_changes(cage, deformed)
    return vc[cage.neighborhoods(size)[vertex_id]]


def all_descriptors(cage: TetCage, deformed: DeformedVerts, size: int) -> np.ndarray:
    """Descriptors for every vertex at once, shape (V, size)."""
    vc = volume_changes(cage, deformed)
    return vc[cage.neighborhoods(size)]


def interpolate_vertex_field(
    cage: TetCage, tet_id: int, barycentric: np.ndarray, vertex_field: np.ndarray
) -> np.ndarray:
    """Barycentric-weighted combination of the tet's four vertex values."""
    vals = vertex_field[cage.tets[tet_id]]
    return np.asarray(barycentric, dtype=np.float64) @ vals


def assemble_laplacian(cage: TetCage) -> sparse.csr_matrix:
    """Mesh Laplacian from linear-FEM stiffness assembly on the rest pose.

    Per tet K_t = volume * G G^T with G the constant gradients of the four
    linear basis functions; L = -sum(scatter(K_t)). L is symmetric with zero
    row sums, and (I - lambda*L) is SPD for lambda > 0.
    """
    corners = cage.rest_vertices[cage.tets]  # (T, 4, 3)
    e = np.stack(
        [
            corners[:, 1] - corners[:, 0],
            corners[:, 2] - corners[:, 0],
            corners[:, 3] - corners[:, 0],
        ],
        axis=2,
    )  # (T, 3, 3), columns are edges in standard order
    vols = np.abs(np.linalg.det(e)) / 6.0
    if np.any(vols < DEGENERATE_VOLUME_EPS):
        raise DegenerateTet("degenerate tet in Laplacian assembly")
    einv = np.linalg.inv(e)  # rows are gradients of basis 1..3
    g = np.empty((cage.num_tets, 4, 3), dtype=np.float64)
    g[:, 1:] = einv
    g[:, 0] = -einv.sum(axis=1)
    k = vols[:, None, None] * np.einsum("tid,tjd->tij", g, g)

    rows = np.repeat(cage.tets, 4, axis=1).ravel()
    cols = np.tile(cage.tets, (1, 4)).ravel()
    n = cage.num_vertices
    lap = sparse.coo_matrix((-k.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    lap.sum_duplicates()
    return lap
