"""Real spherical harmonics up to degree 3, with analytic gradients.

Uses the usual splatting-convention basis ordering; `basis` takes unit
direction vectors of shape (N, 3) and returns (N, (deg+1)^2).
"""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def n_coeffs(deg):
    return (deg + 1) ** 2


def basis(deg, dirs):
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    one = np.ones_like(x)
    cols = [C0 * one]
    if deg >= 1:
        cols += [-C1 * y, C1 * z, -C1 * x]
    if deg >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if deg >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(cols, axis=-1)


def basis_grad(deg, dirs):
    """d basis / d dir, shape (N, (deg+1)^2, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [[zero, zero, zero]]
    if deg >= 1:
        one = np.ones_like(x)
        rows += [
            [zero, -C1 * one, zero],
            [zero, zero, C1 * one],
            [-C1 * one, zero, zero],
        ]
    if deg >= 2:
        rows += [
            [C2[0] * y, C2[0] * x, zero],
            [zero, C2[1] * z, C2[1] * y],
            [-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z],
            [C2[3] * z, zero, C2[3] * x],
            [2 * C2[4] * x, -2 * C2[4] * y, zero],
        ]
    if deg >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            [C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero],
            [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y],
            [-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z],
            [-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)],
            [C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z],
            [2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)],
            [C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero],
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_color(coeffs, dirs):
    """Color offset: 0.5 + sum_b basis_b * coeffs_b.

    coeffs: (N, B, 3); dirs: (N, 3) unit vectors. Degree inferred from B.
    """
    deg = int(round(np.sqrt(coeffs.shape[-2]))) - 1
    b = basis(deg, dirs)
    return 0.5 + np.einsum("nb,nbc->nc", b, coeffs)


def eval_color_vjp(coeffs, dirs, d_color):
    """Gradients of eval_color wrt coeffs and the (unit) direction."""
    deg = int(round(np.sqrt(coeffs.shape[-2]))) - 1
    b = basis(deg, dirs)
    d_coeffs = b[..., :, None] * d_color[..., None, :]
    gb = basis_grad(deg, dirs)  # (N, B, 3dir)
    # d_color . d(color)/d(dir) = sum_b (coeffs_b . d_color) * dbasis_b/ddir
    w = np.einsum("nbc,nc->nb", coeffs, d_color)
    d_dir = np.einsum("nb,nbd->nd", w, gb)
    return d_coeffs, d_dir
