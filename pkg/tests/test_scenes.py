import json

import numpy as np
import pytest

from blendcage.config import load_config
from blendcage import pipeline
from blendcage.images import read_ppm, write_ppm
from blendcage.scenes import (CylinderSpec, GTScene, bend_map, bend_unmap, deform_bend,
                              deform_twist, deforming_vertices, dump_manifest, gt_radiance,
                              load_dataset, make_camera_rig, make_cylinder_cage,
                              manifest_dict, render_gt_image, twist_map, twist_unmap,
                              wrinkle_band, wrinkle_band_energy)
from blendcage.tetmesh import DegenerateTet


class TestCylinderCage:
    def test_minimal_spec_valid(self):
        spec = CylinderSpec(radial_segments=3, axial_segments=2, ring_layers=1)
        cage = make_cylinder_cage(spec)  # constructor validates volumes/connectivity
        assert cage.num_tets == 3 * 2 * 3

    def test_total_volume_close_to_cylinder(self):
        spec = CylinderSpec(radial_segments=16, axial_segments=6, ring_layers=2)
        cage = make_cylinder_cage(spec)
        exact = np.pi * spec.radius**2 * spec.height
        assert abs(cage.rest_volumes.sum() - exact) / exact < 0.05

    def test_interior_faces_shared_by_two(self, small_cylinder):
        t = small_cylinder.tets
        faces = np.concatenate(
            [t[:, [1, 2, 3]], t[:, [0, 2, 3]], t[:, [0, 1, 3]], t[:, [0, 1, 2]]], axis=0
        )
        faces = np.sort(faces, axis=1)
        _, counts = np.unique(faces, axis=0, return_counts=True)
        assert set(counts.tolist()) == {1, 2}

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            CylinderSpec(radial_segments=2)
        with pytest.raises(ValueError):
            CylinderSpec(height=-1.0)


class TestDeformations:
    def test_twist_identity_at_zero(self, small_spec, small_cylinder):
        d = deform_twist(small_spec, small_cylinder, 0.0)
        np.testing.assert_array_equal(d.positions, small_cylinder.rest_vertices)

    def test_twist_top_rim(self, small_spec, small_cylinder):
        d = deform_twist(small_spec, small_cylinder, 1.0)
        rest = small_cylinder.rest_vertices
        r = np.hypot(rest[:, 0], rest[:, 1])
        rim_ids = np.nonzero(np.isclose(rest[:, 2], small_spec.height) & np.isclose(r, r.max()))[0]
        v = rest[rim_ids[0]]
        w = d.positions[rim_ids[0]]
        phi = small_spec.twist_max
        expected = np.array(
            [v[0] * np.cos(phi) - v[1] * np.sin(phi), v[0] * np.sin(phi) + v[1] * np.cos(phi), v[2]]
        )
        np.testing.assert_allclose(w, expected, atol=1e-12)

    def test_twist_preserves_radius_and_z(self, small_spec, small_cylinder):
        d = deform_twist(small_spec, small_cylinder, 0.77)
        r0 = np.hypot(*small_cylinder.rest_vertices[:, :2].T)
        r1 = np.hypot(*d.positions[:, :2].T)
        assert np.abs(r1 - r0).max() <= 1e-12
        np.testing.assert_array_equal(d.positions[:, 2], small_cylinder.rest_vertices[:, 2])

    def test_bend_identity_at_zero(self, small_spec, small_cylinder):
        d = deform_bend(small_spec, small_cylinder, 0.0)
        np.testing.assert_array_equal(d.positions, small_cylinder.rest_vertices)

    def test_bend_rings_stay_coplanar(self, small_spec, small_cylinder):
        d = deform_bend(small_spec, small_cylinder, 1.0)
        z = small_cylinder.rest_vertices[:, 2]
        for level in np.unique(z):
            ring = d.positions[np.isclose(z, level)]
            if len(ring) < 4:
                continue
            centered = ring - ring.mean(axis=0)
            # smallest singular value ~ distance from a common plane
            s = np.linalg.svd(centered, compute_uv=False)
            assert s[-1] <= 1e-9

    def test_bend_axis_arc_length(self, small_spec, small_cylinder):
        zs = np.linspace(0.0, small_spec.height, 2001)
        axis = np.stack([np.zeros_like(zs), np.zeros_like(zs), zs], axis=1)
        bent = bend_map(small_spec, axis, 1.0)
        length = np.linalg.norm(np.diff(bent, axis=0), axis=1).sum()
        assert abs(length - small_spec.height) <= 1e-6

    def test_unmaps_invert_maps(self, small_spec):
        rng = np.random.default_rng(0)
        pts = rng.uniform([-0.4, -0.4, 0.0], [0.4, 0.4, small_spec.height], size=(200, 3))
        for e in (0.0, 0.3, 1.0):
            np.testing.assert_allclose(
                twist_unmap(small_spec, twist_map(small_spec, pts, e), e), pts, atol=1e-10
            )
            np.testing.assert_allclose(
                bend_unmap(small_spec, bend_map(small_spec, pts, e), e), pts, atol=1e-9
            )

    def test_continuity_in_e(self, small_spec, small_cylinder):
        scene = GTScene(small_spec)
        hs = np.arange(0.0, 1.0, 1e-3)
        prev = scene.deform(small_cylinder, 0.0).positions
        lip = 0.0
        for e in hs[1:][:50]:
            cur = scene.deform(small_cylinder, float(e)).positions
            lip = max(lip, np.linalg.norm(cur - prev) / 1e-3)
            prev = cur
        assert lip < 10.0  # bounded velocity at desk scale


class TestGTRadiance:
    def test_rest_has_no_wrinkles(self, small_scene):
        rng = np.random.default_rng(1)
        spec = small_scene.spec
        pts = rng.uniform([-0.3, -0.3, 0.1], [0.3, 0.3, spec.height - 0.1], size=(200, 3))
        amp = small_scene.wrinkle_amplitude_at(pts, 0.0)
        np.testing.assert_array_equal(amp, 0.0)
        sigma, color = gt_radiance(small_scene, pts, 0.0)
        r = np.hypot(pts[:, 0], pts[:, 1])
        zn = 2 * np.pi * pts[:, 2] / spec.height
        theta = np.arctan2(pts[:, 1], pts[:, 0])
        base = np.stack([0.55 + 0.25 * np.sin(zn), 0.50 + 0.20 * np.sin(theta + 1.0),
                         0.45 + 0.15 * np.cos(zn - theta)], axis=1)
        inside = r <= spec.radius
        np.testing.assert_allclose(color[inside], np.clip(base, 0, 1)[inside], atol=1e-12)

    def test_outside_is_vacuum(self, small_scene):
        pts = np.array([[5.0, 0.0, 1.0], [0.0, 0.0, -3.0]])
        sigma, color = gt_radiance(small_scene, pts, 0.5)
        np.testing.assert_array_equal(sigma, 0.0)
        np.testing.assert_array_equal(color, 0.0)

    def test_wrinkle_amplitude_matches_closure(self, small_scene):
        rng = np.random.default_rng(2)
        spec = small_scene.spec
        pts = rng.uniform([-0.4, -0.4, 0.0], [0.4, 0.4, spec.height], size=(100, 3))
        e = 1.0
        amp = small_scene.wrinkle_amplitude_at(pts, e)
        r = np.hypot(pts[:, 0], pts[:, 1])
        gamma = e * spec.twist_max * r / spec.height
        strain = np.sqrt(2 * gamma**2 + gamma**4)
        expected = small_scene.wrinkle_amplitude * np.clip(strain / small_scene.strain_ref, 0, 1)
        np.testing.assert_allclose(amp, expected, atol=1e-12)

    def test_bend_strain_zero_on_neutral_fiber(self):
        spec = CylinderSpec()
        scene = GTScene(spec, family="bend")
        pts = np.stack([np.zeros(5), np.linspace(-0.4, 0.4, 5), np.linspace(0, spec.height, 5)], axis=1)
        np.testing.assert_allclose(scene.strain(pts, 1.0), 0.0, atol=1e-12)
        off = pts.copy()
        off[:, 0] = 0.3  # compressed side
        assert scene.strain(off, 1.0).min() > 0.0


class TestDescriptorSeparation:
    def test_training_expressions_distinct_on_deforming_vertices(self, small_scene, small_cylinder):
        from blendcage.tetmesh import all_descriptors

        defs = [small_scene.deform(small_cylinder, e) for e in (0.0, 0.5, 1.0)]
        descs = [all_descriptors(small_cylinder, d, 20) for d in defs]
        dv = deforming_vertices(small_cylinder, defs)
        assert dv.sum() > 0
        pair_min = np.full(small_cylinder.num_vertices, np.inf)
        for a in range(3):
            for b in range(a + 1, 3):
                d2 = ((descs[a] - descs[b]) ** 2).sum(axis=1)
                pair_min = np.minimum(pair_min, d2)
        assert (pair_min[dv] > 1e-8).mean() >= 0.95


class TestDataset:
    def test_split_contents(self, tiny_dataset):
        cfg, ds = tiny_dataset
        train_e = sorted({ds.expressions[f.expression_id].e for f in ds.frames_in_split("train")})
        assert train_e == [0.0, 0.5, 1.0]
        # every-2nd frame of the 9-frame sequence minus training values
        eval_e = sorted({ds.expressions[f.expression_id].e for f in ds.frames_in_split("eval")})
        assert eval_e == [0.25, 0.75]

    def test_manifest_roundtrip_byte_identical(self, tiny_dataset):
        cfg, ds = tiny_dataset
        raw = (ds.root / "manifest.json").read_bytes()
        again = load_dataset(ds.root)
        assert dump_manifest(manifest_dict(again)).encode() == raw

    def test_images_written_and_readable(self, tiny_dataset):
        cfg, ds = tiny_dataset
        img = read_ppm(ds.root / ds.frames[0].image_path)
        assert img.shape == (48, 48, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestGTRendering:
    def test_gt_march_converged(self, small_scene):
        cams = make_camera_rig(small_scene, ring_count=1, elevated_count=0, image_size=48, focal=50.0)
        a = render_gt_image(small_scene, cams[0], 0.7, n_steps=256, t_near=0.5, t_far=8.0,
                            background=(1, 1, 1))
        b = render_gt_image(small_scene, cams[0], 0.7, n_steps=512, t_near=0.5, t_far=8.0,
                            background=(1, 1, 1))
        assert np.abs(a - b).mean() < 0.5 / 255.0

    def test_rest_frame_has_low_band_energy(self):
        scene = GTScene(CylinderSpec())
        cams = make_camera_rig(scene, ring_count=1, elevated_count=0)
        img0 = render_gt_image(scene, cams[0], 0.0, n_steps=512, t_near=0.5, t_far=8.0,
                               background=(1, 1, 1))
        img1 = render_gt_image(scene, cams[0], 1.0, n_steps=512, t_near=0.5, t_far=8.0,
                               background=(1, 1, 1))
        flo, fhi = wrinkle_band(scene, cams[0])
        assert wrinkle_band_energy(img1, flo, fhi) > 3.0 * wrinkle_band_energy(img0, flo, fhi)

    def test_ppm_roundtrip(self, tmp_path, small_scene):
        cams = make_camera_rig(small_scene, ring_count=1, elevated_count=0, image_size=32, focal=34.0)
        img = render_gt_image(small_scene, cams[0], 0.5, n_steps=128, t_near=0.5, t_far=8.0,
                              background=(0.5, 0.5, 0.5))
        write_ppm(tmp_path / "x.ppm", img)
        back = read_ppm(tmp_path / "x.ppm")
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12
