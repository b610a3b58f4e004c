"""Surface-aligned Gaussian surfel primitives.

A surfel is a zero-thickness elliptical Gaussian: position, unit
quaternion (tangent frame), two tangential log-scales, opacity logit and
spherical-harmonic color coefficients. The collection is stored
struct-of-arrays for vectorized math.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import quaternion as quat
from .errors import DatasetError, InvalidParameterError

SGSC_MAGIC = b"SGSC"
SGSC_VERSION = 1

OPACITY_MAX = 0.999  # keeps transmittance > 0 and gradients finite


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


@dataclass
class SurfelCloud:
    positions: np.ndarray      # (N, 3)
    rotations: np.ndarray      # (N, 4) quaternion, kept unit-norm
    log_scales: np.ndarray     # (N, 2)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray      # (N, (deg+1)^2, 3)

    def __post_init__(self):
        n = len(self.positions)
        for name in ("rotations", "log_scales", "opacity_logits", "sh_coeffs"):
            if len(getattr(self, name)) != n:
                raise InvalidParameterError(f"surfel field {name} has wrong length")

    def __len__(self):
        return len(self.positions)

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return np.minimum(sigmoid(self.opacity_logits), OPACITY_MAX)

    def unit_rotations(self):
        return quat.normalize(self.rotations)

    def normalize_rotations(self):
        self.rotations = quat.normalize(self.rotations)

    def clamp_scales(self, max_scale):
        np.minimum(self.log_scales, np.log(max_scale), out=self.log_scales)

    def copy(self):
        return SurfelCloud(*(np.array(getattr(self, f)) for f in _FIELDS))

    def astype(self, dtype):
        return SurfelCloud(*(getattr(self, f).astype(dtype) for f in _FIELDS))

    def select(self, index):
        return SurfelCloud(*(getattr(self, f)[index] for f in _FIELDS))

    @staticmethod
    def concatenate(clouds):
        return SurfelCloud(
            *(np.concatenate([getattr(c, f) for c in clouds]) for f in _FIELDS)
        )

    @staticmethod
    def empty(sh_degree=0, dtype=np.float32):
        b = (sh_degree + 1) ** 2
        return SurfelCloud(
            np.zeros((0, 3), dtype), np.zeros((0, 4), dtype),
            np.zeros((0, 2), dtype), np.zeros((0,), dtype),
            np.zeros((0, b, 3), dtype),
        )


_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class DeformationDelta:
    d_position: np.ndarray  # (N, 3) additive
    d_scale: np.ndarray     # (N, 3) multiplicative, third component unused
    d_rotation: np.ndarray  # (N, 4) unit quaternion

    def validate(self):
        if np.any(self.d_scale <= 0):
            raise InvalidParameterError("deformation scale factors must be > 0")
        if np.abs(quat.norm(self.d_rotation) - 1.0).max() > 1e-6:
            raise InvalidParameterError("deformation rotation must be unit-norm")

    @staticmethod
    def identity(n, dtype=np.float32):
        dq = np.zeros((n, 4), dtype)
        dq[:, 0] = 1.0
        return DeformationDelta(
            np.zeros((n, 3), dtype), np.ones((n, 3), dtype), dq
        )


def basis_from_quaternion(q):
    """Tangent frame (t_u, t_v, t_w) from a quaternion.

    Near-unit quaternions (within 1e-3) are renormalized silently;
    anything further off is rejected.
    """
    q = np.atleast_2d(np.asarray(q))
    err = np.abs(quat.norm(q) - 1.0)
    if err.max() > 1e-3:
        raise InvalidParameterError("quaternion norm deviates by more than 1e-3")
    R = quat.to_matrix(quat.normalize(q))
    return R[..., :, 0], R[..., :, 1], R[..., :, 2]


def surfel_normals(cloud):
    """Per-surfel normal t_w = t_u x t_v (steepest density change)."""
    return basis_from_quaternion(cloud.rotations)[2]


def local_to_world(cloud, u, v):
    """Map tangent-plane coordinates (u, v) to world space per surfel."""
    t_u, t_v, _ = basis_from_quaternion(cloud.rotations)
    s = cloud.scales()
    u = np.asarray(u, dtype=cloud.dtype)
    v = np.asarray(v, dtype=cloud.dtype)
    return (
        cloud.positions
        + (s[:, 0] * u)[:, None] * t_u
        + (s[:, 1] * v)[:, None] * t_v
    )


def density(u, v):
    """Unit-amplitude Gaussian falloff in tangent coordinates."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.exp(-(u * u + v * v) / 2.0)


def world_covariance(cloud):
    """Rank-<=2 world covariance O diag(s_u^2, s_v^2, 0) O^T, shape (N, 3, 3)."""
    t_u, t_v, _ = basis_from_quaternion(cloud.rotations)
    s = cloud.scales()
    return (
        (s[:, 0] ** 2)[:, None, None] * t_u[:, :, None] * t_u[:, None, :]
        + (s[:, 1] ** 2)[:, None, None] * t_v[:, :, None] * t_v[:, None, :]
    )


def apply_deformation(cloud, delta, validate=True):
    """Deformed copy: p + dx, scales * ds[:2], q x dq.

    The rotation product is left unnormalized (consumers renormalize);
    an identity delta therefore reproduces the input bit for bit.
    """
    if validate:
        delta.validate()
    q = quat.multiply(cloud.rotations, delta.d_rotation)
    return SurfelCloud(
        positions=cloud.positions + delta.d_position,
        rotations=q,
        log_scales=cloud.log_scales + np.log(delta.d_scale[:, :2]),
        opacity_logits=cloud.opacity_logits.copy(),
        sh_coeffs=cloud.sh_coeffs.copy(),
    )


def save_sgsc(path, cloud):
    deg = cloud.sh_degree
    n = len(cloud)
    per = np.concatenate(
        [
            cloud.positions.reshape(n, 3),
            cloud.rotations.reshape(n, 4),
            cloud.log_scales.reshape(n, 2),
            cloud.opacity_logits.reshape(n, 1),
            cloud.sh_coeffs.reshape(n, -1),
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(SGSC_MAGIC)
        fh.write(struct.pack("<III", SGSC_VERSION, n, deg))
        fh.write(per.tobytes())


def load_sgsc(path, dtype=np.float32):
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != SGSC_MAGIC:
                raise DatasetError(f"{path}: bad magic {magic!r}")
            version, n, deg = struct.unpack("<III", fh.read(12))
            if version != SGSC_VERSION:
                raise DatasetError(f"{path}: unsupported version {version}")
            b = (deg + 1) ** 2
            width = 3 + 4 + 2 + 1 + 3 * b
            raw = np.frombuffer(fh.read(), dtype="<f4")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if raw.size != n * width:
        raise DatasetError(f"{path}: truncated surfel payload")
    per = raw.reshape(n, width).astype(dtype)
    return SurfelCloud(
        positions=per[:, 0:3].copy(),
        rotations=per[:, 3:7].copy(),
        log_scales=per[:, 7:9].copy(),
        opacity_logits=per[:, 9].copy(),
        sh_coeffs=per[:, 10:].reshape(n, b, 3).copy(),
    )
