"""Pinhole camera model, projection math and the camera text format."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, InvalidParameterError, InvalidSampleError

NEAR_PLANE = 0.01
COV_DILATION = 0.3  # px^2, low-pass floor added to every screen covariance


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image size must be positive")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise InvalidParameterError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise InvalidParameterError("rotation must be proper (det = +1)")

    @property
    def K(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam_points(self, p):
        return p @ self.rotation.T + self.translation

    def cam_to_world_points(self, p_cam):
        return (p_cam - self.translation) @ self.rotation


def world_to_camera(cam, p, cov=None, normal=None):
    """Transform points (and optionally covariances/normals) into camera frame."""
    R = cam.rotation.astype(p.dtype)
    p_cam = p @ R.T + cam.translation.astype(p.dtype)
    cov_cam = None if cov is None else np.einsum("ij,njk,lk->nil", R, cov, R)
    n_cam = None if normal is None else normal @ R.T
    return p_cam, cov_cam, n_cam


def perspective_jacobian(cam, p_cam, near=NEAR_PLANE):
    """Affine approximation of the projection at each camera-space point.

    Returns (J, valid): J has shape (N, 2, 3); rows with z <= near are
    flagged invalid (culled) and get a zero Jacobian.
    """
    p_cam = np.atleast_2d(p_cam)
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    J = np.zeros(p_cam.shape[:1] + (2, 3), dtype=p_cam.dtype)
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    J[~valid] = 0.0
    return J, valid


def screen_covariance(J, cov_cam, dilation=COV_DILATION):
    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    return cov2d


def project(cam, p_cam):
    """Camera-space points to pixel coordinates."""
    z = p_cam[..., 2]
    return np.stack(
        [cam.fx * p_cam[..., 0] / z + cam.cx, cam.fy * p_cam[..., 1] / z + cam.cy],
        axis=-1,
    )


def backproject(cam, x, y, depth):
    """Pixel + depth to a world-space point (inverse of project + pose)."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise InvalidSampleError("backproject requires depth > 0")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p_cam = np.stack(
        [(x - cam.cx) / cam.fx * depth, (y - cam.cy) / cam.fy * depth, depth], axis=-1
    )
    return cam.cam_to_world_points(p_cam)


def save_cameras(path, cam, timestamps):
    w2c = np.eye(4)
    w2c[:3, :3] = cam.rotation
    w2c[:3, 3] = cam.translation
    lines = [
        f"fx: {float(cam.fx)!r}",
        f"fy: {float(cam.fy)!r}",
        f"cx: {float(cam.cx)!r}",
        f"cy: {float(cam.cy)!r}",
        f"width: {int(cam.width)}",
        f"height: {int(cam.height)}",
        "w2c: " + " ".join(repr(float(v)) for v in w2c.reshape(-1)),
        f"frames: {len(timestamps)}",
    ]
    lines += [f"t={float(t)!r}" for t in timestamps]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cameras(path):
    """Parse the camera text file; returns (CameraModel, timestamps)."""
    kv = {}
    timestamps = []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("t="):
                    timestamps.append(float(line[2:]))
                else:
                    key, _, value = line.partition(":")
                    kv[key.strip()] = value.strip()
    except OSError as exc:
        raise DatasetError(f"cannot read camera file {path}: {exc}") from exc
    try:
        w2c = np.array([float(v) for v in kv["w2c"].split()]).reshape(4, 4)
        cam = CameraModel(
            fx=float(kv["fx"]), fy=float(kv["fy"]),
            cx=float(kv["cx"]), cy=float(kv["cy"]),
            width=int(kv["width"]), height=int(kv["height"]),
            rotation=w2c[:3, :3], translation=w2c[:3, 3],
        )
        n_frames = int(kv["frames"])
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"malformed camera file {path}: {exc}") from exc
    if len(timestamps) != n_frames:
        raise DatasetError(
            f"camera file {path}: frames: {n_frames} but {len(timestamps)} timestamps"
        )
    return cam, timestamps
