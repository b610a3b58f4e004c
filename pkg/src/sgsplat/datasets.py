"""On-disk dataset layout: images, depth maps, occlusion masks, cameras.

Layout under a root directory:
    images/%06d.png   8-bit sRGB, linearized with gamma 2.2 on load
    depth/%06d.sgsd   raw little-endian float32 depth
    masks/%06d.png    nonzero = occluded
    cameras.txt       intrinsics, extrinsics and per-frame timestamps

Every 8th frame (index = 7 mod 8) belongs to the test split.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .camera import load_cameras, save_cameras
from .errors import DatasetError
from .pimi import FrameBundle

SGSD_MAGIC = b"SGSD"
GAMMA = 2.2
TEST_EVERY = 8  # 7:1 train/test split


@dataclass
class Dataset:
    root: str
    frames: list          # FrameBundle per frame, index order
    camera: object        # CameraModel
    train_indices: list
    test_indices: list

    def __len__(self):
        return len(self.frames)


def split_indices(n_frames):
    test = [i for i in range(n_frames) if i % TEST_EVERY == TEST_EVERY - 1]
    train = [i for i in range(n_frames) if i % TEST_EVERY != TEST_EVERY - 1]
    return train, test


def save_sgsd(path, depth):
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise DatasetError(f"{path}: depth must be 2-D")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(SGSD_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(depth, "<f4").tobytes())


def load_sgsd(path):
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != SGSD_MAGIC:
                raise DatasetError(f"{path}: bad magic {magic!r}")
            w, h = struct.unpack("<II", fh.read(8))
            raw = np.frombuffer(fh.read(), dtype="<f4")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if raw.size != w * h:
        raise DatasetError(f"{path}: expected {w * h} floats, got {raw.size}")
    return raw.reshape(h, w).astype(np.float64)


def load_image(path):
    """Linear [0,1] float image from an 8-bit sRGB PNG."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    return arr ** GAMMA


def save_image(path, image):
    """Write a linear [0,1] image as 8-bit sRGB."""
    enc = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** (1.0 / GAMMA)
    Image.fromarray(np.round(enc * 255.0).astype(np.uint8)).save(path)


def load_mask(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    return (arr != 0).astype(np.uint8)


def save_mask(path, mask):
    Image.fromarray(
        np.where(np.asarray(mask) != 0, 255, 0).astype(np.uint8)
    ).save(path)


def _frame_paths(root, index):
    return (
        os.path.join(root, "images", f"{index:06d}.png"),
        os.path.join(root, "depth", f"{index:06d}.sgsd"),
        os.path.join(root, "masks", f"{index:06d}.png"),
    )


def load_dataset(root):
    cam_path = os.path.join(root, "cameras.txt")
    if not os.path.isfile(cam_path):
        raise DatasetError(f"missing camera file {cam_path}")
    cam, timestamps = load_cameras(cam_path)
    n = len(timestamps)
    if n == 0:
        raise DatasetError(f"{root}: camera file lists no frames")
    frames = []
    for i in range(n):
        ip, dp, mp = _frame_paths(root, i)
        for p in (ip, dp, mp):
            if not os.path.isfile(p):
                raise DatasetError(f"missing dataset file {p}")
        image = load_image(ip)
        depth = load_sgsd(dp)
        mask = load_mask(mp)
        if image.shape[:2] != (cam.height, cam.width):
            raise DatasetError(
                f"{ip}: image is {image.shape[1]}x{image.shape[0]}, camera "
                f"says {cam.width}x{cam.height}"
            )
        frames.append(FrameBundle(image=image, depth=depth, tool_mask=mask,
                                  timestamp=timestamps[i], index=i))
    train, test = split_indices(n)
    return Dataset(root=root, frames=frames, camera=cam,
                   train_indices=train, test_indices=test)


def save_dataset(root, frames, cam):
    """Write frames + camera in the standard layout. Images are linear
    [0,1] and get gamma-encoded; depth/masks are written losslessly."""
    for sub in ("images", "depth", "masks"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for i, f in enumerate(frames):
        ip, dp, mp = _frame_paths(root, i)
        save_image(ip, f.image)
        save_sgsd(dp, f.depth)
        save_mask(mp, f.tool_mask)
    save_cameras(os.path.join(root, "cameras.txt"),
                 cam, [f.timestamp for f in frames])
