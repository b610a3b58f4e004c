"""Shared scene builders and the session-scoped end-to-end training runs."""

import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sgsplat import cli
from sgsplat.camera import CameraModel
from sgsplat.deform import DeformationNetwork
from sgsplat.pimi import FrameBundle
from sgsplat.quaternion import normalize as q_normalize
from sgsplat.surfel import SurfelCloud


def identity_camera(size=16, focal=20.0):
    return CameraModel(fx=focal, fy=focal,
                       cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
                       width=size, height=size,
                       rotation=np.eye(3), translation=np.zeros(3))


def random_cloud(rng, n, sh_degree=3, dtype=np.float64, spread=0.25):
    """Surfels scattered in front of an identity-pose camera."""
    positions = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(1.8, 2.4, n),
    ])
    rotations = q_normalize(rng.standard_normal((n, 4)))
    log_scales = np.log(rng.uniform(0.15, 0.3, (n, 2)))
    opacity_logits = rng.uniform(-0.5, 1.5, n)
    sh = rng.normal(0.0, 0.4, (n, (sh_degree + 1) ** 2, 3))
    return SurfelCloud(
        positions=positions.astype(dtype),
        rotations=rotations.astype(dtype),
        log_scales=log_scales.astype(dtype),
        opacity_logits=opacity_logits.astype(dtype),
        sh_coeffs=sh.astype(dtype),
    )


def random_frame(rng, cam, timestamp=0.3, masked_patch=True):
    h, w = cam.height, cam.width
    image = rng.uniform(0.05, 0.95, (h, w, 3))
    depth = rng.uniform(1.6, 2.6, (h, w))
    mask = np.zeros((h, w), np.uint8)
    if masked_patch:
        y0 = int(rng.integers(0, max(h - 4, 1)))
        x0 = int(rng.integers(0, max(w - 4, 1)))
        mask[y0:y0 + 3, x0:x0 + 3] = 1
    return FrameBundle(image=image, depth=depth, tool_mask=mask,
                       timestamp=timestamp, index=0)


def random_net(rng, out_scale=0.02, float64=False):
    """Network with a non-zero output layer so the deformation is active."""
    net = DeformationNetwork.create(rng)
    net.weights[-1] = rng.uniform(
        -out_scale, out_scale, net.weights[-1].shape).astype(np.float32)
    net.biases[-1] = rng.uniform(
        -out_scale, out_scale, net.biases[-1].shape).astype(np.float32)
    if float64:
        net.weights = [w.astype(np.float64) for w in net.weights]
        net.biases = [b.astype(np.float64) for b in net.biases]
    return net


@pytest.fixture(scope="session")
def acceptance_runs(tmp_path_factory):
    """One synthetic dataset plus two identically seeded training runs.

    Shared by the end-to-end reconstruction test (which checks metrics and
    wall time of the first run) and the determinism test (which compares
    the two runs byte for byte).
    """
    base = tmp_path_factory.mktemp("acceptance")
    data = str(base / "data")
    rc = cli.main(["synth", "--out", data, "--seed", "0",
                   "--frames", "30", "--resolution", "64"])
    assert rc == 0

    runs = []
    times = []
    for name in ("run_a", "run_b"):
        out = str(base / name)
        t0 = time.monotonic()
        rc = cli.main(["train", "--data", data, "--out", out,
                       "--seed", "7", "--deterministic", "--iters", "3000"])
        times.append(time.monotonic() - t0)
        assert rc == 0
        runs.append(out)
    return {"data": data, "runs": runs, "seconds": times}
