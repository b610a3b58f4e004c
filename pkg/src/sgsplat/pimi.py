"""Canonical cloud initialization from mask-integrated depth and color.

Per-frame binary confidence masks (finite depth, inside the 2nd-99th
percentile band, not tool-occluded) weight a per-pixel aggregation of
depth and color across the sequence; confident pixels are back-projected
into camera-facing surfels.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .camera import backproject
from .errors import DatasetError, InitializationError
from .quaternion import from_axis_angle
from .surfel import SurfelCloud, logit

SH_DC = 0.28209479
DEPTH_PCT_LOW = 2.0
DEPTH_PCT_HIGH = 99.0
INIT_OPACITY = 0.1
DEFAULT_STRIDE = 2


@dataclass
class FrameBundle:
    """One observation: linear RGB image, metric depth, tool mask, time."""
    image: np.ndarray      # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W) scene units
    tool_mask: np.ndarray  # (H, W) binary, 1 = occluded by tool
    timestamp: float       # in [0, 1]
    index: int = 0

    def __post_init__(self):
        h, w = self.depth.shape
        if self.image.shape[:2] != (h, w) or self.tool_mask.shape != (h, w):
            raise DatasetError("frame image/depth/mask dimensions disagree")


@dataclass
class AggregateMaps:
    depth_star: np.ndarray  # (H, W) confidence-weighted mean depth
    color_star: np.ndarray  # (H, W, 3)
    weight_sum: np.ndarray  # (H, W) number of confident observations
    valid: np.ndarray       # (H, W) bool, weight_sum > 0


def confidence_mask(frame):
    """Binary per-pixel confidence for one frame.

    A pixel is confident when its depth is finite, lies inside the
    [2nd, 99th] percentile band (inclusive; linear-interpolation
    estimator on the frame's finite depths) and is not tool-occluded.
    """
    depth = frame.depth
    finite = np.isfinite(depth)
    usable = finite & (frame.tool_mask == 0)
    if not finite.any():
        warnings.warn("frame has no finite depth; empty confidence mask")
        return np.zeros(depth.shape, dtype=bool)
    lo, hi = np.percentile(depth[finite], [DEPTH_PCT_LOW, DEPTH_PCT_HIGH])
    mask = usable & (depth >= lo) & (depth <= hi)
    if not mask.any():
        warnings.warn("confidence mask is empty for this frame")
    return mask


def aggregate(frames):
    """Confidence-weighted per-pixel mean of depth and color over frames."""
    if len(frames) == 0:
        raise DatasetError("aggregation needs at least one frame")
    shape = frames[0].depth.shape
    for f in frames:
        if f.depth.shape != shape:
            raise DatasetError("frames have inconsistent dimensions")
    w_sum = np.zeros(shape)
    d_sum = np.zeros(shape)
    c_sum = np.zeros(shape + (3,))
    for f in frames:
        w = confidence_mask(f).astype(np.float64)
        w_sum += w
        d_sum += np.where(w > 0, f.depth, 0.0) * w
        c_sum += f.image * w[..., None]
    valid = w_sum > 0
    denom = np.where(valid, w_sum, 1.0)
    return AggregateMaps(
        depth_star=np.where(valid, d_sum / denom, 0.0),
        color_star=np.where(valid[..., None], c_sum / denom[..., None], 0.0),
        weight_sum=w_sum,
        valid=valid,
    )


def _camera_facing_rotations(positions, cam_center):
    """Unit quaternions whose frame's third column points at the camera."""
    d = cam_center[None, :] - positions
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    d = d / np.where(norm > 0, norm, 1.0)
    e_z = np.array([0.0, 0.0, 1.0])
    c = d @ e_z
    axis = np.cross(np.broadcast_to(e_z, d.shape), d)
    axis_norm = np.linalg.norm(axis, axis=1, keepdims=True)
    angle = np.arccos(np.clip(c, -1.0, 1.0))
    # parallel/anti-parallel: identity, or a half-turn about x
    safe = axis_norm[:, 0] > 1e-12
    axis = np.where(safe[:, None], axis / np.where(axis_norm > 0, axis_norm, 1.0),
                    np.array([1.0, 0.0, 0.0]))
    angle = np.where(safe, angle, np.where(c > 0, 0.0, np.pi))
    return from_axis_angle(axis, angle)


def build_cloud(agg, cam, stride=DEFAULT_STRIDE, sh_degree=3, dtype=np.float32):
    """Back-project every stride-th valid aggregate pixel into a surfel."""
    if stride < 1:
        raise InitializationError("stride must be >= 1")
    if not agg.valid.any():
        raise InitializationError("aggregate has no valid pixels")
    h, w = agg.valid.shape
    ys, xs = np.mgrid[0:h:stride, 0:w:stride]
    ys, xs = ys.ravel(), xs.ravel()
    keep = agg.valid[ys, xs]
    ys, xs = ys[keep], xs[keep]
    if ys.size == 0:
        raise InitializationError("no valid pixels on the stride grid")
    depths = agg.depth_star[ys, xs]
    colors = agg.color_star[ys, xs]

    positions = backproject(cam, xs.astype(np.float64), ys.astype(np.float64),
                            depths)
    rotations = _camera_facing_rotations(positions, cam.center)
    scale = depths * stride / cam.fx
    log_scales = np.log(np.stack([scale, scale], axis=1))
    n = ys.size
    n_coeffs = (sh_degree + 1) ** 2
    sh = np.zeros((n, n_coeffs, 3))
    sh[:, 0, :] = (colors - 0.5) / SH_DC
    return SurfelCloud(
        positions=positions.astype(dtype),
        rotations=rotations.astype(dtype),
        log_scales=log_scales.astype(dtype),
        opacity_logits=np.full(n, logit(INIT_OPACITY), dtype=dtype),
        sh_coeffs=sh.astype(dtype),
    )


def initialize(frames, cam, stride=DEFAULT_STRIDE, sh_degree=3,
               dtype=np.float32):
    """Full pipeline: aggregate the sequence, then build the cloud."""
    return build_cloud(aggregate(frames), cam, stride=stride,
                       sh_degree=sh_degree, dtype=dtype)
