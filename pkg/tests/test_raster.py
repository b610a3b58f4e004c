"""Rasterizer: compositing semantics, binning, analytic gradients."""

import numpy as np

from sgsplat.camera import backproject
from sgsplat.raster import (
    RenderGrad,
    render,
    render_backward,
    tile_bin,
)
from sgsplat.raster.geometry import prepare_splats
from sgsplat.surfel import SurfelCloud

from conftest import identity_camera, random_cloud
from oracles import brute_force_render

SH_DC = 0.28209479177387814


def single_surfel_cloud(color_dc=(0.8, 0.2, 0.4), logit=20.0,
                        depth=2.0, cam=None, pixel=(8, 8)):
    cam = cam if cam is not None else identity_camera()
    pos = backproject(cam, float(pixel[0]), float(pixel[1]), depth)
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = (np.asarray(color_dc) - 0.5) / SH_DC
    return SurfelCloud(
        positions=pos[None, :].astype(np.float64),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.log([[0.25, 0.25]]),
        opacity_logits=np.array([logit]),
        sh_coeffs=sh,
    )


class TestRenderForward:
    def test_empty_scene_renders_background(self):
        cam = identity_camera()
        out = render(SurfelCloud.empty(dtype=np.float64), cam,
                     background=(0.2, 0.4, 0.6))
        np.testing.assert_allclose(out.color,
                                   np.broadcast_to([0.2, 0.4, 0.6],
                                                   (16, 16, 3)), atol=0)
        np.testing.assert_array_equal(out.alpha, 0.0)
        np.testing.assert_array_equal(out.depth, 0.0)
        np.testing.assert_array_equal(out.argmax_index, -1)

    def test_single_opaque_surfel_center_pixel(self):
        cam = identity_camera()
        cloud = single_surfel_cloud(color_dc=(0.8, 0.2, 0.4), logit=50.0)
        bg = np.array([0.1, 0.1, 0.1])
        out = render(cloud, cam, background=tuple(bg))
        # dead-center pixel: opacity saturates at the 0.999 cap
        expect = 0.999 * np.array([0.8, 0.2, 0.4]) + 0.001 * bg
        np.testing.assert_allclose(out.color[8, 8], expect, atol=1e-9)
        np.testing.assert_allclose(out.alpha[8, 8], 0.999, atol=1e-9)
        np.testing.assert_allclose(out.depth[8, 8], 2.0, rtol=1e-9)

    def test_empty_pixels_keep_background_and_zero_maps(self):
        cam = identity_camera()
        cloud = single_surfel_cloud()
        bg = (0.25, 0.5, 0.75)
        out = render(cloud, cam, background=bg)
        empty = out.alpha == 0.0
        assert empty.any()
        np.testing.assert_allclose(
            out.color[empty],
            np.broadcast_to(bg, out.color[empty].shape), atol=1e-12)
        np.testing.assert_array_equal(out.depth[empty], 0.0)
        np.testing.assert_array_equal(out.normal[empty], 0.0)
        np.testing.assert_array_equal(out.unit_normal()[empty], 0.0)

    def test_alpha_bounded_by_one(self):
        rng = np.random.default_rng(31)
        cloud = random_cloud(rng, 40)
        out = render(cloud, identity_camera())
        assert out.alpha.min() >= 0.0
        assert out.alpha.max() <= 1.0 + 1e-9

    def test_matches_brute_force_compositor_small_scenes(self):
        rng = np.random.default_rng(32)
        cam = identity_camera()
        for _ in range(5):
            cloud = random_cloud(rng, int(rng.integers(1, 9)))
            out = render(cloud, cam)
            oc, od, on, oa, _ = brute_force_render(cloud, cam)
            assert np.abs(out.color - oc).max() < 2e-3
            assert np.abs(out.alpha - oa).max() < 2e-3
            assert np.abs(out.normal - on).max() < 2e-3

    def test_opacity_increase_never_decreases_alpha(self):
        rng = np.random.default_rng(33)
        cam = identity_camera()
        cloud = random_cloud(rng, 10)
        base = render(cloud, cam).alpha
        bumped = cloud.copy()
        bumped.opacity_logits[3] += 1.0
        after = render(bumped, cam).alpha
        assert (after >= base - 1e-9).all()

    def test_forward_backward_deterministic(self):
        rng = np.random.default_rng(34)
        cam = identity_camera()
        cloud = random_cloud(rng, 20)
        grad = RenderGrad(d_color=rng.standard_normal((16, 16, 3)))
        out1 = render(cloud, cam)
        out2 = render(cloud, cam)
        np.testing.assert_array_equal(out1.color, out2.color)
        np.testing.assert_array_equal(out1.argmax_index, out2.argmax_index)
        b1 = render_backward(cloud, cam, out1, grad)
        b2 = render_backward(cloud, cam, out2, grad)
        for f in ("d_position", "d_rotation", "d_log_scales", "d_opacity",
                  "d_sh", "homo_grad"):
            np.testing.assert_array_equal(getattr(b1, f), getattr(b2, f))


class TestTileBin:
    @staticmethod
    def _bins(cloud, cam, tile_size=16):
        cache = prepare_splats(cloud, cam)
        return cache, tile_bin(cache.mu, cache.radii, cache.z, cache.valid,
                               cam.height, cam.width, tile_size)

    def test_small_splat_in_exactly_one_tile(self):
        cam = identity_camera(size=32)
        cloud = single_surfel_cloud(cam=cam, pixel=(5, 5))
        cloud.log_scales[:] = np.log(0.02)
        _, (offsets, lists) = self._bins(cloud, cam)
        counts = np.diff(offsets)
        assert counts.sum() == 1
        assert counts[0] == 1  # top-left tile

    def test_straddling_splat_in_both_tiles(self):
        cam = identity_camera(size=32)
        cloud = single_surfel_cloud(cam=cam, pixel=(16, 5))
        cloud.log_scales[:] = np.log(0.05)
        cache, (offsets, lists) = self._bins(cloud, cam)
        assert cache.mu[0, 0] - cache.radii[0, 0] < 16 < cache.mu[0, 0] + cache.radii[0, 0]
        counts = np.diff(offsets)
        assert counts.sum() == 2
        assert counts[0] == 1 and counts[1] == 1

    def test_matches_brute_force_overlap_and_order(self):
        rng = np.random.default_rng(35)
        cam = identity_camera(size=48, focal=60.0)
        cloud = random_cloud(rng, 30)
        ts = 16
        cache, (offsets, lists) = self._bins(cloud, cam, ts)
        tiles_x = (cam.width + ts - 1) // ts
        tiles_y = (cam.height + ts - 1) // ts
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                tid = ty * tiles_x + tx
                got = list(lists[offsets[tid]:offsets[tid + 1]])
                expect = []
                for k in range(len(cloud)):
                    if not cache.valid[k]:
                        continue
                    x0 = cache.mu[k, 0] - cache.radii[k, 0]
                    x1 = cache.mu[k, 0] + cache.radii[k, 0]
                    y0 = cache.mu[k, 1] - cache.radii[k, 1]
                    y1 = cache.mu[k, 1] + cache.radii[k, 1]
                    if (x1 < 0 or y1 < 0 or x0 > cam.width - 1
                            or y0 > cam.height - 1):
                        continue
                    if (int(np.floor(x0 / ts)) <= tx <= int(np.floor(x1 / ts))
                            and int(np.floor(y0 / ts)) <= ty
                            <= int(np.floor(y1 / ts))):
                        expect.append(k)
                expect.sort(key=lambda k: (cache.z[k], k))
                assert got == expect


def _scalar_loss(cloud, cam, gc, gd, gn, ga, gm, depth_mask):
    out = render(cloud, cam)
    med = np.zeros_like(out.normal)
    has = out.argmax_index >= 0
    cache = prepare_splats(cloud, cam)
    med[has] = cache.n_cam[out.argmax_index[has]]
    return (float((out.color * gc).sum())
            + float((out.depth * gd * depth_mask).sum())
            + float((out.normal * gn).sum())
            + float((out.alpha * ga).sum())
            + float((med * gm).sum()))


class TestRenderBackward:
    def test_zero_upstream_gradient_gives_zero(self):
        rng = np.random.default_rng(36)
        cam = identity_camera()
        cloud = random_cloud(rng, 8)
        out = render(cloud, cam)
        buf = render_backward(cloud, cam, out, RenderGrad())
        for f in ("d_position", "d_rotation", "d_log_scales", "d_opacity",
                  "d_sh", "homo_grad"):
            np.testing.assert_array_equal(getattr(buf, f), 0.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(37)
        cam = identity_camera()
        cloud = random_cloud(rng, 6)
        out = render(cloud, cam)
        gc = rng.standard_normal((16, 16, 3))
        gn = rng.standard_normal((16, 16, 3))
        ga = rng.standard_normal((16, 16))
        gm = rng.standard_normal((16, 16, 3))
        depth_mask = (out.alpha > 1e-2).astype(np.float64)
        gd = rng.standard_normal((16, 16))
        buf = render_backward(
            cloud, cam, out,
            RenderGrad(d_color=gc, d_depth=gd * depth_mask, d_normal=gn,
                       d_alpha=ga, d_median_normal=gm))
        groups = {
            "positions": buf.d_position,
            "rotations": buf.d_rotation,
            "log_scales": buf.d_log_scales,
            "opacity_logits": buf.d_opacity,
            "sh_coeffs": buf.d_sh,
        }
        eps = 1e-6
        for name, analytic in groups.items():
            arr = getattr(cloud, name)
            flat_idx = rng.choice(arr.size, size=min(6, arr.size),
                                  replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(fi, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + eps
                hi = _scalar_loss(cloud, cam, gc, gd, gn, ga, gm, depth_mask)
                arr[idx] = orig - eps
                lo = _scalar_loss(cloud, cam, gc, gd, gn, ga, gm, depth_mask)
                arr[idx] = orig
                fd = (hi - lo) / (2 * eps)
                an = float(np.asarray(analytic)[idx])
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an)) + 1e-8, (
                    f"{name}{idx}: fd={fd} analytic={an}")

    def test_single_surfel_mean_color_gradients(self):
        cam = identity_camera()
        cloud = single_surfel_cloud(logit=0.8)
        out = render(cloud, cam)
        gc = np.full((16, 16, 3), 1.0 / (16 * 16 * 3))
        zeros2 = np.zeros((16, 16))
        zeros3 = np.zeros((16, 16, 3))
        buf = render_backward(cloud, cam, out, RenderGrad(d_color=gc))
        eps = 1e-5
        for name, analytic in (("positions", buf.d_position),
                               ("log_scales", buf.d_log_scales),
                               ("opacity_logits", buf.d_opacity),
                               ("rotations", buf.d_rotation),
                               ("sh_coeffs", buf.d_sh)):
            arr = getattr(cloud, name)
            for fi in range(arr.size):
                idx = np.unravel_index(fi, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + eps
                hi = _scalar_loss(cloud, cam, gc, zeros2, zeros3, zeros2,
                                  zeros3, zeros2)
                arr[idx] = orig - eps
                lo = _scalar_loss(cloud, cam, gc, zeros2, zeros3, zeros2,
                                  zeros3, zeros2)
                arr[idx] = orig
                fd = (hi - lo) / (2 * eps)
                an = float(np.asarray(analytic)[idx])
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an)) + 1e-9

    def test_absolute_accumulation_beats_cancelled_signed_sum(self):
        # one broad rear surfel behind a small front one; opposing
        # per-pixel screen gradients across the footprint cancel in the
        # signed sum but not in the absolute accumulation
        cam = identity_camera()
        rear = single_surfel_cloud(color_dc=(0.9, 0.9, 0.9), logit=1.0,
                                   depth=2.5)
        rear.log_scales[:] = np.log(0.6)
        front = single_surfel_cloud(color_dc=(0.1, 0.1, 0.1), logit=0.5,
                                    depth=1.8)
        front.log_scales[:] = np.log(0.1)
        cloud = SurfelCloud.concatenate([rear, front])
        out = render(cloud, cam)
        # a uniform upstream gradient over the symmetric footprint pulls
        # the left and right pixel halves in opposite screen directions
        gc = np.ones((16, 16, 3))
        buf = render_backward(cloud, cam, out, RenderGrad(d_color=gc))
        signed = np.abs(buf.d_mu[0]).sum()
        assert buf.homo_grad[0] > signed * 2.0
        assert buf.homo_grad[0] > 0.0
        assert buf.touch_count[0] > 0
