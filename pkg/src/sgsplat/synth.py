"""Synthetic deforming-scene generator with an independent ray oracle.

The ground truth is a textured height field z(x, y, t) = base +
amplitude*sin(2*pi*freq*x)*sin(2*pi*t), rendered per pixel by bisecting
the ray-surface intersection. A rectangular occluder sweeps across the
image; its footprint is recorded in the masks. Occluder-free images and
analytic normals are written alongside the dataset for evaluation. The
generator shares no code with the splatting renderer.
"""

import os
from dataclasses import dataclass

import numpy as np

from .camera import CameraModel
from .datasets import GAMMA, save_dataset, save_sgsd
from .errors import ConfigurationError
from .pimi import FrameBundle

BISECT_ITERS = 60


@dataclass
class SynthScene:
    resolution: int = 64
    n_frames: int = 30
    base_depth: float = 2.0
    amplitude: float = 0.05
    frequency: float = 1.0
    texture_seed: int = 0
    focal: float = 70.0
    occluder: bool = True
    occluder_size: float = 0.22      # fraction of the image side
    occluder_depth: float = 1.2
    occluder_color: tuple = (0.25, 0.22, 0.2)

    def validate(self):
        # the surface must stay single-valued along every ray
        half_tan = (self.resolution / 2.0) / self.focal
        slope = self.amplitude * 2.0 * np.pi * self.frequency * half_tan
        if slope >= 0.9:
            raise ConfigurationError(
                "height-field slope too steep for unique ray intersections"
            )
        if self.n_frames < 1 or self.resolution < 4:
            raise ConfigurationError("scene too small")
        if self.occluder_depth >= self.base_depth - self.amplitude:
            raise ConfigurationError("occluder must sit in front of the surface")


def make_camera(scene):
    r = scene.resolution
    return CameraModel(
        fx=scene.focal, fy=scene.focal,
        cx=r / 2.0 - 0.5, cy=r / 2.0 - 0.5,
        width=r, height=r,
        rotation=np.eye(3), translation=np.zeros(3),
    )


def height(scene, x, y, t):
    """Surface depth z over world (x, y) at time t."""
    return scene.base_depth + scene.amplitude * np.sin(
        2.0 * np.pi * scene.frequency * np.asarray(x)
    ) * np.sin(2.0 * np.pi * t)


def surface_normal(scene, x, y, t):
    """Unit normal of the height field, z component toward the camera."""
    x = np.asarray(x, dtype=np.float64)
    dzdx = (scene.amplitude * 2.0 * np.pi * scene.frequency
            * np.cos(2.0 * np.pi * scene.frequency * x)
            * np.sin(2.0 * np.pi * t))
    n = np.stack([-dzdx, np.zeros_like(dzdx), -np.ones_like(dzdx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def ray_depth(scene, cam, xs, ys, t):
    """Camera-space depth of the ray-surface hit per pixel, by bisection.

    Rays leave the (identity-pose) camera through pixel centers; the root
    of s - z(s*dx, s*dy, t) is bracketed by the surface depth extremes.
    """
    dx = (np.asarray(xs, dtype=np.float64) - cam.cx) / cam.fx
    dy = (np.asarray(ys, dtype=np.float64) - cam.cy) / cam.fy
    lo = np.full(dx.shape, scene.base_depth - scene.amplitude - 1e-6)
    hi = np.full(dx.shape, scene.base_depth + scene.amplitude + 1e-6)
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        f = mid - height(scene, mid * dx, mid * dy, t)
        lo = np.where(f < 0.0, mid, lo)
        hi = np.where(f < 0.0, hi, mid)
    return 0.5 * (lo + hi)


def texture(scene, x, y):
    """Smooth seeded RGB texture over world coordinates, in [0.08, 0.92]."""
    rng = np.random.default_rng(scene.texture_seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.empty(x.shape + (3,))
    for c in range(3):
        acc = np.full(x.shape, 0.5)
        for _ in range(3):
            u, v = rng.uniform(0.2, 0.9, 2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.05, 0.14)
            acc = acc + amp * np.sin(2.0 * np.pi * (u * x + v * y) + phase)
        out[..., c] = acc
    return np.clip(out, 0.08, 0.92)


def occluder_bounds(scene, t):
    """Pixel rectangle (x0, x1, y0, y1) of the occluder at time t."""
    r = scene.resolution
    side = int(round(scene.occluder_size * r))
    x0 = int(round((r - side) * t))
    y0 = (r - side) // 2
    return x0, x0 + side, y0, y0 + side


def quantize_image(image):
    """Round-trip a linear image through the 8-bit sRGB encoding."""
    enc = np.round(np.clip(image, 0.0, 1.0) ** (1.0 / GAMMA) * 255.0) / 255.0
    return enc ** GAMMA


def render_frame(scene, cam, index):
    """One ground-truth frame plus its occluder-free image and normals."""
    t = index / scene.n_frames
    r = scene.resolution
    ys, xs = np.mgrid[0:r, 0:r].astype(np.float64)
    # snap to f32 so the stored depth round-trips bit for bit
    depth = ray_depth(scene, cam, xs, ys, t).astype(np.float32).astype(np.float64)
    px = depth * (xs - cam.cx) / cam.fx
    py = depth * (ys - cam.cy) / cam.fy
    clean = quantize_image(texture(scene, px, py))
    normals = surface_normal(scene, px, py, t)

    image = clean.copy()
    depth_obs = depth.copy()
    mask = np.zeros((r, r), np.uint8)
    if scene.occluder:
        x0, x1, y0, y1 = occluder_bounds(scene, t)
        image[y0:y1, x0:x1] = quantize_image(
            np.broadcast_to(np.asarray(scene.occluder_color),
                            (y1 - y0, x1 - x0, 3))
        )
        depth_obs[y0:y1, x0:x1] = scene.occluder_depth
        mask[y0:y1, x0:x1] = 1
    frame = FrameBundle(image=image, depth=depth_obs, tool_mask=mask,
                        timestamp=t, index=index)
    return frame, clean, depth, normals


def generate(scene, root):
    """Write the full dataset plus ground-truth extras under root."""
    scene.validate()
    cam = make_camera(scene)
    frames = []
    gt_dir = os.path.join(root, "gt")
    os.makedirs(gt_dir, exist_ok=True)
    for i in range(scene.n_frames):
        frame, clean, depth, normals = render_frame(scene, cam, i)
        frames.append(frame)
        np.save(os.path.join(gt_dir, f"clean_{i:06d}.npy"), clean)
        np.save(os.path.join(gt_dir, f"normal_{i:06d}.npy"), normals)
        save_sgsd(os.path.join(gt_dir, f"depth_{i:06d}.sgsd"), depth)
    save_dataset(root, frames, cam)
    return frames, cam


def load_gt(root, index, kind):
    """Ground-truth extras: kind is 'clean' or 'normal'."""
    return np.load(os.path.join(root, "gt", f"{kind}_{index:06d}.npy"))
