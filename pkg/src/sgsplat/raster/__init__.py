"""Tile-based forward splatting and the analytic backward pass."""

from dataclasses import dataclass, field

import numpy as np

from .. import backend
from ..camera import COV_DILATION, NEAR_PLANE
from .geometry import prepare_splats, prepare_splats_vjp

TILE_SIZE = 16


@dataclass
class RenderOutput:
    color: np.ndarray       # (H, W, 3)
    depth: np.ndarray       # (H, W) alpha-weighted expected depth
    normal: np.ndarray      # (H, W, 3) raw weighted accumulation
    alpha: np.ndarray       # (H, W)
    transmittance: np.ndarray  # (H, W) remaining transmittance
    argmax_index: np.ndarray   # (H, W) splat holding the max compositing weight

    def unit_normal(self):
        """Normal accumulation normalized on read; zero where empty."""
        n = np.linalg.norm(self.normal, axis=-1, keepdims=True)
        return np.where(n > 0, self.normal / np.where(n > 0, n, 1.0), 0.0)


@dataclass
class RenderGrad:
    """Upstream gradients for render_backward, one array per output map."""
    d_color: np.ndarray = None
    d_depth: np.ndarray = None
    d_normal: np.ndarray = None  # wrt the raw normal accumulation
    d_alpha: np.ndarray = None
    d_median_normal: np.ndarray = None  # wrt the max-weight splat normal

    def filled(self, height, width, dtype):
        def z(x, shape):
            return np.zeros(shape, dtype) if x is None else np.ascontiguousarray(x, dtype)
        return RenderGrad(
            z(self.d_color, (height, width, 3)),
            z(self.d_depth, (height, width)),
            z(self.d_normal, (height, width, 3)),
            z(self.d_alpha, (height, width)),
            z(self.d_median_normal, (height, width, 3)),
        )


@dataclass
class GradientBuffer:
    d_position: np.ndarray
    d_rotation: np.ndarray
    d_log_scales: np.ndarray
    d_opacity: np.ndarray
    d_sh: np.ndarray
    homo_grad: np.ndarray    # per-surfel sum of |d mu_x| + |d mu_y| over pixels
    touch_count: np.ndarray  # per-surfel contributing-pixel counter
    d_mu: np.ndarray = None  # signed screen-center gradient (diagnostic)


def tile_bin(mu, radii, z, valid, height, width, tile_size=TILE_SIZE):
    """Bin splats into every tile their 3-sigma screen AABB overlaps.

    Within each tile, splats are depth sorted ascending, ties by index.
    Returns (offsets, lists) int32 arrays.
    """
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    order = np.argsort(z, kind="stable")
    per_tile = [[] for _ in range(tiles_x * tiles_y)]
    for k in order:
        if not valid[k]:
            continue
        x0 = mu[k, 0] - radii[k, 0]
        x1 = mu[k, 0] + radii[k, 0]
        y0 = mu[k, 1] - radii[k, 1]
        y1 = mu[k, 1] + radii[k, 1]
        if x1 < 0 or y1 < 0 or x0 > width - 1 or y0 > height - 1:
            continue
        tx0 = max(int(np.floor(x0 / tile_size)), 0)
        tx1 = min(int(np.floor(x1 / tile_size)), tiles_x - 1)
        ty0 = max(int(np.floor(y0 / tile_size)), 0)
        ty1 = min(int(np.floor(y1 / tile_size)), tiles_y - 1)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                per_tile[ty * tiles_x + tx].append(k)
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int32)
    for i, lst in enumerate(per_tile):
        offsets[i + 1] = offsets[i] + len(lst)
    lists = np.fromiter(
        (k for lst in per_tile for k in lst), dtype=np.int32, count=int(offsets[-1])
    )
    return offsets, lists


def _kernel_args(cache):
    return (
        np.ascontiguousarray(cache.mu),
        np.ascontiguousarray(cache.conic),
        np.ascontiguousarray(cache.alpha),
        np.ascontiguousarray(cache.color),
        np.ascontiguousarray(cache.z),
        np.ascontiguousarray(cache.n_cam),
    )


def render(cloud, cam, sh_mode="camera", background=(0.0, 0.0, 0.0),
           near=NEAR_PLANE, dilation=COV_DILATION, tile_size=TILE_SIZE):
    """Forward splatting pass; returns a RenderOutput."""
    dt = cloud.dtype
    h, w = cam.height, cam.width
    cache = prepare_splats(cloud, cam, near=near, dilation=dilation, sh_mode=sh_mode)
    offsets, lists = tile_bin(cache.mu, cache.radii, cache.z, cache.valid,
                              h, w, tile_size)
    bg = np.asarray(background, dtype=dt)
    out = RenderOutput(
        color=np.zeros((h, w, 3), dt),
        depth=np.zeros((h, w), dt),
        normal=np.zeros((h, w, 3), dt),
        alpha=np.zeros((h, w), dt),
        transmittance=np.ones((h, w), dt),
        argmax_index=np.full((h, w), -1, np.int32),
    )
    backend.raster_kernels().forward(
        *_kernel_args(cache), h, w, tile_size, offsets, lists, bg,
        out.color, out.depth, out.normal, out.alpha, out.transmittance,
        out.argmax_index,
    )
    return out


def render_backward(cloud, cam, output, d_output, sh_mode="camera",
                    background=(0.0, 0.0, 0.0), near=NEAR_PLANE,
                    dilation=COV_DILATION, tile_size=TILE_SIZE):
    """Analytic gradients of all composited outputs wrt surfel parameters."""
    dt = cloud.dtype
    n = len(cloud)
    h, w = cam.height, cam.width
    cache = prepare_splats(cloud, cam, near=near, dilation=dilation, sh_mode=sh_mode)
    offsets, lists = tile_bin(cache.mu, cache.radii, cache.z, cache.valid,
                              h, w, tile_size)
    bg = np.asarray(background, dtype=dt)
    g = d_output.filled(h, w, dt)

    d_mu = np.zeros((n, 2), dt)
    d_conic = np.zeros((n, 3), dt)
    d_alpha = np.zeros(n, dt)
    d_color = np.zeros((n, 3), dt)
    d_z = np.zeros(n, dt)
    d_ncam = np.zeros((n, 3), dt)
    homo = np.zeros(n, dt)
    touch = np.zeros(n, np.int64)

    backend.raster_kernels().backward(
        *_kernel_args(cache), h, w, tile_size, offsets, lists, bg,
        g.d_color, g.d_depth, g.d_normal, g.d_alpha, g.d_median_normal,
        output.argmax_index,
        d_mu, d_conic, d_alpha, d_color, d_z, d_ncam, homo, touch,
    )
    d_pos, d_rot, d_ls, d_op, d_sh = prepare_splats_vjp(
        cloud, cam, cache, d_mu, d_conic, d_alpha, d_color, d_z, d_ncam
    )
    return GradientBuffer(
        d_position=d_pos, d_rotation=d_rot, d_log_scales=d_ls,
        d_opacity=d_op, d_sh=d_sh, homo_grad=homo, touch_count=touch,
        d_mu=d_mu,
    )
