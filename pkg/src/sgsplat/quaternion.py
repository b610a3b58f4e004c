"""Quaternion helpers (w, x, y, z convention) with analytic VJPs.

All functions accept batched arrays of shape (..., 4) and are dtype
preserving so the same code paths serve float32 production runs and
float64 gradient checking.
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def norm(q):
    return np.linalg.norm(q, axis=-1)


def normalize(q):
    return q / norm(q)[..., None]


def normalize_vjp(q, d_qn):
    """VJP of normalize: gradient wrt the raw (unnormalized) quaternion."""
    n = norm(q)[..., None]
    qn = q / n
    return (d_qn - qn * np.sum(qn * d_qn, axis=-1, keepdims=True)) / n


def multiply(q, r):
    """Hamilton product q ⊗ r."""
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    rw, rx, ry, rz = np.moveaxis(r, -1, 0)
    return np.stack(
        [
            qw * rw - qx * rx - qy * ry - qz * rz,
            qw * rx + qx * rw + qy * rz - qz * ry,
            qw * ry - qx * rz + qy * rw + qz * rx,
            qw * rz + qx * ry - qy * rx + qz * rw,
        ],
        axis=-1,
    )


def multiply_vjp(q, r, d_out):
    """VJPs of the Hamilton product wrt both factors."""
    # d(q ⊗ r) = R(r) dq = L(q) dr with the usual 4x4 matrix forms.
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    rw, rx, ry, rz = np.moveaxis(r, -1, 0)
    gw, gx, gy, gz = np.moveaxis(d_out, -1, 0)
    d_q = np.stack(
        [
            gw * rw + gx * rx + gy * ry + gz * rz,
            -gw * rx + gx * rw - gy * rz + gz * ry,
            -gw * ry + gx * rz + gy * rw - gz * rx,
            -gw * rz - gx * ry + gy * rx + gz * rw,
        ],
        axis=-1,
    )
    d_r = np.stack(
        [
            gw * qw + gx * qx + gy * qy + gz * qz,
            -gw * qx + gx * qw + gy * qz - gz * qy,
            -gw * qy - gx * qz + gy * qw + gz * qx,
            -gw * qz + gx * qy - gy * qx + gz * qw,
        ],
        axis=-1,
    )
    return d_q, d_r


def to_matrix(q):
    """Rotation matrix of a unit quaternion, shape (..., 3, 3).

    Columns are the rotated basis vectors (t_u, t_v, t_w).
    """
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def to_matrix_vjp(q, d_R):
    """VJP of to_matrix wrt the (unit) quaternion.

    d_R has shape (..., 3, 3); returns (..., 4).
    """
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = d_R
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    d_w = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    d_x = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    d_y = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    d_z = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([d_w, d_x, d_y, d_z], axis=-1)


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = np.asarray(angle, dtype=float) / 2.0
    return np.concatenate(
        [np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1
    )


def random_unit(rng, n, dtype=np.float64):
    q = rng.standard_normal((n, 4))
    return normalize(q).astype(dtype)
