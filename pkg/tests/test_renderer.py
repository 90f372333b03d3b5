import numpy as np
import pytest

from blendcage.bvh import TetBVH
from blendcage.radiance import init_model
from blendcage.renderer import (Camera, Ray, SampleSet, backprop_composite, composite,
                                deltas_from_t, generate_ray, generate_rays, image_pixels,
                                importance_t, project, render_image, sample_coarse,
                                sample_importance)
from blendcage.tetmesh import DeformedVerts

from conftest import lattice_cage


def make_camera():
    th = 0.3
    rot = np.array(
        [[np.cos(th), 0, np.sin(th)], [0, 1, 0], [-np.sin(th), 0, np.cos(th)]]
    )
    return Camera(fx=120.0, fy=110.0, cx=48.0, cy=50.0, width=96, height=100,
                  rotation=rot, center=np.array([0.5, -0.2, 3.0]))


class TestCamera:
    def test_principal_point_gives_forward(self):
        cam = make_camera()
        _, d = generate_rays(cam, np.array([[cam.cx, cam.cy]]))
        np.testing.assert_allclose(d[0], cam.rotation[:, 2], atol=1e-12)

    def test_symmetric_pixels_mirror(self):
        cam = make_camera()
        off = np.array([10.0, 6.0])
        _, d = generate_rays(cam, np.array([[cam.cx + off[0], cam.cy + off[1]],
                                            [cam.cx - off[0], cam.cy - off[1]]]))
        mid = 0.5 * (d[0] + d[1])
        mid /= np.linalg.norm(mid)
        np.testing.assert_allclose(mid, cam.rotation[:, 2], atol=1e-12)

    def test_reprojection(self):
        cam = make_camera()
        rng = np.random.default_rng(1)
        pix = rng.uniform([0, 0], [cam.width, cam.height], size=(50, 2))
        o, d = generate_rays(cam, pix)
        pts = o + rng.uniform(0.5, 5.0, size=(50, 1)) * d
        back = project(cam, pts)
        assert np.abs(back - pix).max() <= 1e-6

    def test_rejects_bad_rotation(self):
        with pytest.raises(ValueError, match="orthonormal"):
            Camera(fx=1, fy=1, cx=0, cy=0, width=2, height=2,
                   rotation=np.eye(3) + 1e-6, center=np.zeros(3))

    def test_ray_validation(self):
        with pytest.raises(ValueError):
            Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]), 0.0, 1.0)
        with pytest.raises(ValueError):
            Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 2.0, 1.0)
        r = generate_ray(make_camera(), 4.0, 5.0, 0.1, 10.0)
        assert abs(np.linalg.norm(r.direction) - 1.0) <= 1e-12


class TestCoarseSampling:
    def test_midpoint_ladder(self):
        ss = sample_coarse(np.array([1.0]), np.array([3.0]), 4, u=np.full((1, 4), 0.5))
        np.testing.assert_allclose(ss.t[0], [1.25, 1.75, 2.25, 2.75], atol=1e-12)

    def test_single_sample_inside_span(self):
        rng = np.random.default_rng(2)
        ss = sample_coarse(np.array([0.5]), np.array([0.9]), 1, rng=rng)
        assert 0.5 <= ss.t[0, 0] <= 0.9

    def test_strictly_increasing(self):
        rng = np.random.default_rng(3)
        ss = sample_coarse(np.zeros(20), np.full(20, 2.5), 64, rng=rng)
        assert np.all(np.diff(ss.t, axis=1) > 0)

    def test_deltas_close_at_span_end(self):
        ss = sample_coarse(np.array([0.0]), np.array([1.0]), 8, u=np.full((1, 8), 0.25))
        np.testing.assert_allclose(ss.delta[0, :-1], np.diff(ss.t[0]), atol=1e-15)
        assert ss.delta[0, -1] == pytest.approx(1.0 - ss.t[0, -1], abs=1e-15)


class TestImportanceSampling:
    def test_equal_weights_reduce_to_stratified(self):
        coarse = sample_coarse(np.zeros(1), np.ones(1), 4, u=np.full((1, 4), 0.5))
        u = (np.arange(8) + 0.5) / 8
        t_new = importance_t(np.ones((1, 4)), np.zeros(1), np.ones(1), 8, u=u[None, :])
        np.testing.assert_allclose(t_new[0], u, atol=1e-12)

    def test_single_hot_bin_concentrates(self):
        w = np.zeros((1, 8))
        w[0, 3] = 5.0
        rng = np.random.default_rng(4)
        t_new = importance_t(w, np.zeros(1), np.ones(1), 64, rng=rng)
        lo, hi = 3 / 8, 4 / 8
        frac_inside = ((t_new >= lo) & (t_new <= hi)).mean()
        assert frac_inside > 0.95  # floor weights allow a few samples elsewhere

    def test_histogram_matches_cdf(self):
        rng = np.random.default_rng(5)
        w = np.array([[0.1, 0.5, 0.2, 1.2, 0.05, 0.6, 0.9, 0.3]])
        n = 100_000
        u = rng.random((1, n))
        t_new = importance_t(w, np.zeros(1), np.ones(1), n, u=u)
        wf = np.maximum(w[0], 1e-5)
        p = wf / wf.sum()
        hist, _ = np.histogram(t_new[0], bins=np.linspace(0, 1, 9))
        emp = hist / n
        assert np.abs(emp - p).max() <= 0.01

    def test_merged_sorted_with_coarse(self):
        rng = np.random.default_rng(6)
        coarse = sample_coarse(np.zeros(3), np.full(3, 2.0), 16, rng=rng)
        coarse.sigma = rng.uniform(0, 1, coarse.t.shape)
        coarse.color = np.zeros((*coarse.t.shape, 3))
        _, w, _ = composite(coarse, np.zeros(3))
        merged = sample_importance(coarse, w, np.zeros(3), 8, rng=rng)
        assert merged.t.shape == (3, 24)
        assert np.all(np.diff(merged.t, axis=1) >= 0)
        for row in range(3):
            assert np.isin(coarse.t[row], merged.t[row]).all()


def hand_sample_set(rng, r=2, n=16, span=1.0):
    t = np.sort(rng.uniform(0, span, (r, n)), axis=1)
    ends = np.full(r, span)
    ss = SampleSet(t=t, delta=deltas_from_t(t, ends), span_end=ends)
    ss.sigma = rng.uniform(0, 2.0, (r, n))
    ss.color = rng.uniform(0, 1, (r, n, 3))
    return ss


class TestComposite:
    def test_zero_density_gives_background(self):
        rng = np.random.default_rng(7)
        ss = hand_sample_set(rng)
        ss.sigma[:] = 0.0
        bg = np.array([0.2, 0.5, 0.9])
        px, w, tape = composite(ss, bg)
        np.testing.assert_array_equal(px, np.tile(bg, (2, 1)))
        np.testing.assert_array_equal(tape.t_final, 1.0)

    def test_homogeneous_closed_form(self):
        ss = sample_coarse(np.zeros(1), np.ones(1), 1024, u=np.full((1, 1024), 0.5))
        ss.sigma = np.ones((1, 1024))
        ss.color = np.tile(np.array([1.0, 0.0, 0.0]), (1, 1024, 1))
        px, _, _ = composite(ss, np.zeros(3))
        assert px[0, 0] == pytest.approx(1.0 - np.exp(-1.0), abs=1e-3)
        assert px[0, 1] == 0.0

    def test_error_halves_with_doubling(self):
        errs = []
        rng = np.random.default_rng(8)
        for n in (64, 128, 256, 512):
            ss = sample_coarse(np.zeros(1), np.ones(1), n, rng=rng)
            ss.sigma = np.ones((1, n))
            ss.color = np.ones((1, n, 3))
            px, _, _ = composite(ss, np.zeros(3))
            errs.append(abs(px[0, 0] - (1 - np.exp(-1.0))))
        assert errs[1] < errs[0] and errs[2] < errs[1] and errs[3] < errs[2]

    def test_opaque_first_sample(self):
        rng = np.random.default_rng(9)
        ss = hand_sample_set(rng)
        ss.sigma[:, 0] = 60.0 / ss.delta[:, 0]  # sigma * delta >= 40
        px, _, _ = composite(ss, np.ones(3))
        np.testing.assert_allclose(px, ss.color[:, 0, :], atol=1e-12)

    def test_weight_partition(self):
        rng = np.random.default_rng(10)
        ss = hand_sample_set(rng, r=5, n=64)
        _, w, tape = composite(ss, np.zeros(3))
        np.testing.assert_allclose(w.sum(axis=1) + tape.t_final, 1.0, atol=1e-9)
        assert np.all(np.diff(tape.trans, axis=1) <= 1e-15)
        assert np.all((tape.trans > 0) & (tape.trans <= 1))


class TestBackprop:
    def test_zero_upstream_gives_zeros(self):
        rng = np.random.default_rng(11)
        ss = hand_sample_set(rng)
        _, _, tape = composite(ss, np.zeros(3))
        ds, dc = backprop_composite(tape, np.zeros((2, 3)))
        assert not ds.any() and not dc.any()

    def test_single_sample_hand_formula(self):
        ss = SampleSet(t=np.array([[0.5]]), delta=np.array([[0.3]]), span_end=np.array([0.8]))
        ss.sigma = np.array([[1.7]])
        ss.color = np.array([[[0.2, 0.4, 0.8]]])
        _, _, tape = composite(ss, np.zeros(3))
        ds, dc = backprop_composite(tape, np.array([[1.0, 0.0, 0.0]]))
        assert dc[0, 0, 0] == pytest.approx(1.0 - np.exp(-1.7 * 0.3), rel=1e-12)
        # dC/dsigma = delta * exp(-s) * c (single sample, black background)
        assert ds[0, 0] == pytest.approx(0.3 * np.exp(-1.7 * 0.3) * 0.2, rel=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        ss = hand_sample_set(rng, r=3, n=8)
        bg = np.array([0.3, 0.1, 0.6])
        up = rng.standard_normal((3, 3))

        def val(sigma, color):
            s2 = SampleSet(t=ss.t, delta=ss.delta, span_end=ss.span_end)
            s2.sigma, s2.color = sigma, color
            px, _, _ = composite(s2, bg)
            return float((px * up).sum())

        _, _, tape = composite(ss, bg)
        ds, dc = backprop_composite(tape, up)
        h = 1e-5
        for r in range(3):
            for i in range(8):
                s = ss.sigma.copy()
                s[r, i] += h
                fp = val(s, ss.color)
                s[r, i] -= 2 * h
                fm = val(s, ss.color)
                fd = (fp - fm) / (2 * h)
                assert abs(fd - ds[r, i]) <= 1e-5 * max(abs(fd), 1e-6)
                for ch in range(3):
                    c = ss.color.copy()
                    c[r, i, ch] += h
                    fp = val(ss.sigma, c)
                    c[r, i, ch] -= 2 * h
                    fm = val(ss.sigma, c)
                    fd = (fp - fm) / (2 * h)
                    assert abs(fd - dc[r, i, ch]) <= 1e-5 * max(abs(fd), 1e-6)


@pytest.fixture(scope="module")
def box_scene():
    cage = lattice_cage(2)
    deformed = DeformedVerts(0.0, cage.rest_vertices.copy())
    bvh = TetBVH(cage, deformed)
    model = init_model((8, 8, 8), np.array([-0.2, -0.2, -0.2]), np.array([2.2, 2.2, 2.2]), K=2)
    model.density.values[:] = 3.0
    model.template_color.values[..., 0] = 2.0
    model.template_color.values[..., 1] = -2.0
    cam = Camera(fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32,
                 rotation=np.eye(3), center=np.array([1.0, 1.0, -4.0]))
    return cage, deformed, bvh, model, cam


class TestRenderImage:
    def test_empty_span_gives_background(self, box_scene):
        cage, deformed, bvh, model, _ = box_scene
        away = Camera(fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32,
                      rotation=np.eye(3), center=np.array([0.0, 0.0, 50.0]))
        img = render_image(model, cage, bvh, away, background=(0.1, 0.2, 0.3),
                           t_near=0.1, t_far=5.0, alpha_const=np.zeros(2))
        np.testing.assert_array_equal(img.reshape(-1, 3), np.tile([0.1, 0.2, 0.3], (32 * 32, 1)))

    def test_opaque_silhouette(self, box_scene):
        cage, deformed, bvh, model, cam = box_scene
        img = render_image(model, cage, bvh, cam, background=(1.0, 1.0, 1.0),
                           t_near=0.5, t_far=12.0, alpha_const=np.zeros(2), seed=5)
        center = img[16, 16]
        expected = np.array([1 / (1 + np.exp(-2.0)), 1 / (1 + np.exp(2.0)), 0.5])
        np.testing.assert_allclose(center, expected, atol=5e-3)
        assert np.allclose(img[0, 0], 1.0)

    def test_deterministic_across_runs_and_workers(self, box_scene):
        cage, deformed, bvh, model, cam = box_scene
        kw = dict(background=(1.0, 1.0, 1.0), t_near=0.5, t_far=12.0,
                  alpha_const=np.zeros(2), seed=9, chunk=128)
        a = render_image(model, cage, bvh, cam, **kw)
        b = render_image(model, cage, bvh, cam, **kw)
        c = render_image(model, cage, bvh, cam, workers=4, **kw)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)

    def test_train_vs_inference_consistency(self, box_scene):
        from blendcage.metrics import psnr

        cage, deformed, bvh, model, cam = box_scene
        kw = dict(background=(1.0, 1.0, 1.0), t_near=0.5, t_far=12.0,
                  alpha_const=np.zeros(2), n_coarse=128, n_importance=64)
        a = render_image(model, cage, bvh, cam, mode="train", seed=1, **kw)
        b = render_image(model, cage, bvh, cam, mode="inference", seed=2, **kw)
        assert psnr(a, b) >= 35.0

    def test_unknown_mode_rejected(self, box_scene):
        cage, deformed, bvh, model, cam = box_scene
        with pytest.raises(ValueError, match="mode"):
            render_image(model, cage, bvh, cam, mode="wat", alpha_const=np.zeros(2))


class TestPixelGrid:
    def test_row_major_centers(self):
        cam = make_camera()
        px = image_pixels(cam)
        assert px.shape == (cam.width * cam.height, 2)
        np.testing.assert_array_equal(px[0], [0.5, 0.5])
        np.testing.assert_array_equal(px[1], [1.5, 0.5])
        np.testing.assert_array_equal(px[cam.width], [0.5, 1.5])
