import numpy as np
import pytest

from blendcage.bvh import BARY_EPS, TetBVH, canonicalize, canonicalize_points, locate_point
from blendcage.tetmesh import DeformedVerts, TetCage

from conftest import lattice_cage


def exhaustive_locate(cage, positions, point):
    """Reference: scan every tet, return the lowest-index containing tet."""
    for ti, tt in enumerate(cage.tets):
        c = positions[tt]
        e = np.stack([c[1] - c[0], c[2] - c[0], c[3] - c[0]], axis=1)
        try:
            lam = np.linalg.solve(e, point - c[0])
        except np.linalg.LinAlgError:
            continue
        b = np.array([1.0 - lam.sum(), *lam])
        if np.all(b >= -BARY_EPS):
            return ti, b
    return None


@pytest.fixture(scope="module")
def deformed_lattice():
    cage = lattice_cage(2)
    rng = np.random.default_rng(10)
    m = np.eye(3) + 0.25 * rng.standard_normal((3, 3))
    shift = rng.standard_normal(3)
    pos = cage.rest_vertices @ m.T + shift
    return cage, DeformedVerts(1.0, pos), m, shift


class TestLocate:
    def test_centroid_found_with_quarter_bary(self, deformed_lattice):
        cage, dv, _, _ = deformed_lattice
        bvh = TetBVH(cage, dv)
        centroid = dv.positions[cage.tets[7]].mean(axis=0)
        res = locate_point(bvh, centroid)
        assert res is not None
        tet, bary = res
        # centroid may sit in an overlapping/abutting tet of lower index only
        # if shared; for an interior centroid the owning tet wins
        assert tet == 7
        np.testing.assert_allclose(bary, 0.25, atol=1e-9)

    def test_far_point_misses(self, deformed_lattice):
        cage, dv, _, _ = deformed_lattice
        bvh = TetBVH(cage, dv)
        assert locate_point(bvh, np.array([100.0, 100.0, 100.0])) is None

    def test_matches_exhaustive_scan(self, deformed_lattice):
        cage, dv, m, shift = deformed_lattice
        bvh = TetBVH(cage, dv)
        rng = np.random.default_rng(11)
        pts = rng.uniform(-0.5, 2.5, size=(1000, 3)) @ m.T + shift
        tet_ids, barys = bvh.locate(pts)
        for i in range(len(pts)):
            ref = exhaustive_locate(cage, dv.positions, pts[i])
            if ref is None:
                assert tet_ids[i] == -1
            else:
                assert tet_ids[i] == ref[0]
                np.testing.assert_allclose(barys[i], ref[1], atol=1e-9)

    def test_barycentric_sums_to_one(self, deformed_lattice):
        cage, dv, m, shift = deformed_lattice
        bvh = TetBVH(cage, dv)
        rng = np.random.default_rng(12)
        pts = rng.uniform(0.0, 2.0, size=(200, 3)) @ m.T + shift
        tet_ids, barys = bvh.locate(pts)
        hit = tet_ids >= 0
        np.testing.assert_allclose(barys[hit].sum(axis=1), 1.0, atol=1e-12)


class TestCanonicalize:
    def test_identity_at_rest(self, cube_cage):
        rest = DeformedVerts(0.0, cube_cage.rest_vertices.copy())
        bvh = TetBVH(cube_cage, rest)
        rng = np.random.default_rng(13)
        pts = rng.uniform(0.1, 1.9, size=(100, 3))
        canonical, tet_ids, _ = canonicalize_points(cube_cage, bvh, pts)
        hit = tet_ids >= 0
        assert hit.sum() > 50
        np.testing.assert_allclose(canonical[hit], pts[hit], atol=1e-12)

    def test_translated_centroid_maps_to_rest_centroid(self, cube_cage):
        shifted = DeformedVerts(1.0, cube_cage.rest_vertices + np.array([3.0, -2.0, 1.0]))
        bvh = TetBVH(cube_cage, shifted)
        tet = 4
        centroid = shifted.positions[cube_cage.tets[tet]].mean(axis=0)
        out = canonicalize(cube_cage, shifted, centroid, bvh=bvh)
        rest_centroid = cube_cage.rest_vertices[cube_cage.tets[tet]].mean(axis=0)
        np.testing.assert_allclose(out, rest_centroid, atol=1e-12)

    def test_affine_round_trip(self, deformed_lattice):
        cage, dv, m, shift = deformed_lattice
        bvh = TetBVH(cage, dv)
        rng = np.random.default_rng(14)
        pts = rng.uniform(0.1, 1.9, size=(500, 3)) @ m.T + shift
        canonical, tet_ids, _ = canonicalize_points(cage, bvh, pts)
        hit = tet_ids >= 0
        assert hit.sum() > 300
        redeformed = canonical[hit] @ m.T + shift
        assert np.abs(redeformed - pts[hit]).max() <= 1e-9

    def test_miss_passes_through(self, cube_cage):
        rest = DeformedVerts(0.0, cube_cage.rest_vertices.copy())
        assert canonicalize(cube_cage, rest, np.array([50.0, 0.0, 0.0])) is None


class TestRaySpan:
    def test_miss_all_boxes(self, cube_cage):
        rest = DeformedVerts(0.0, cube_cage.rest_vertices.copy())
        bvh = TetBVH(cube_cage, rest)
        t0, t1, hit = bvh.ray_spans(
            np.array([[10.0, 10.0, 10.0]]), np.array([[0.0, 0.0, 1.0]]), 0.0, 100.0
        )
        assert not hit[0]

    def test_unit_cube_slab(self):
        # One tet whose AABB is exactly the unit cube.
        verts = np.array([[0, 0, 0], [1, 1, 0], [1, 0, 1], [0, 1, 1]], float)
        cage = TetCage(verts, np.array([[0, 1, 2, 3]]))
        bvh = TetBVH(cage, DeformedVerts(0.0, verts.copy()))
        t0, t1, hit = bvh.ray_spans(
            np.array([[-2.0, 0.5, 0.5]]), np.array([[1.0, 0.0, 0.0]]), 0.0, 100.0
        )
        assert hit[0]
        assert t0[0] == pytest.approx(2.0, abs=1e-12)
        assert t1[0] == pytest.approx(3.0, abs=1e-12)

    def test_span_contains_all_dense_hits(self, deformed_lattice):
        cage, dv, _, _ = deformed_lattice
        bvh = TetBVH(cage, dv)
        rng = np.random.default_rng(15)
        center = dv.positions.mean(axis=0)
        for _ in range(30):
            origin = center + 6.0 * rng.standard_normal(3)
            d = center - origin + 0.5 * rng.standard_normal(3)
            d /= np.linalg.norm(d)
            t0, t1, hit = bvh.ray_spans(origin[None], d[None], 0.0, 100.0)
            ts = np.linspace(0.0, 20.0, 2000)
            pts = origin[None] + ts[:, None] * d[None]
            tet_ids, _ = bvh.locate(pts)
            inside = ts[tet_ids >= 0]
            if len(inside):
                assert hit[0]
                assert t0[0] <= inside.min() + 1e-9
                assert t1[0] >= inside.max() - 1e-9

    def test_clips_to_near_far(self, cube_cage):
        rest = DeformedVerts(0.0, cube_cage.rest_vertices.copy())
        bvh = TetBVH(cube_cage, rest)
        origin = np.array([[1.0, 1.0, -5.0]])
        d = np.array([[0.0, 0.0, 1.0]])
        t0, t1, hit = bvh.ray_spans(origin, d, 5.5, 6.0)
        assert hit[0] and t0[0] >= 5.5 - 1e-12 and t1[0] <= 6.0 + 1e-12
