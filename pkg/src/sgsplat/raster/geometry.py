"""Per-surfel screen-space preparation and its analytic backward chain.

`prepare_splats` turns a SurfelCloud into flat per-splat arrays consumed
by the pixel kernels; `prepare_splats_vjp` chains per-splat gradients
(screen center, conic, opacity, color, depth, camera normal) back to the
raw surfel parameters.
"""

from dataclasses import dataclass

import numpy as np

from .. import quaternion as quat
from .. import sh
from ..camera import COV_DILATION, NEAR_PLANE
from ..surfel import OPACITY_MAX, sigmoid


@dataclass
class SplatCache:
    valid: np.ndarray        # (N,) bool, inside the frustum
    mu: np.ndarray           # (N, 2) screen center, px
    conic: np.ndarray        # (N, 3) inverse 2D covariance (a, b, c)
    alpha: np.ndarray        # (N,) activated opacity
    color: np.ndarray        # (N, 3)
    z: np.ndarray            # (N,) camera depth
    n_cam: np.ndarray        # (N, 3) camera-space normal
    radii: np.ndarray        # (N, 2) 3-sigma half extents, px
    # intermediates kept for the backward chain
    qn: np.ndarray
    R_q: np.ndarray
    s: np.ndarray
    p_cam: np.ndarray
    J: np.ndarray
    cov_w: np.ndarray
    cov_cam: np.ndarray
    cov2d: np.ndarray        # (N, 3) (a, b, c)
    dirs: np.ndarray
    dir_norm: np.ndarray
    sh_mode: str


def prepare_splats(cloud, cam, near=NEAR_PLANE, dilation=COV_DILATION,
                   sh_mode="camera"):
    dt = cloud.dtype
    n = len(cloud)
    R = cam.rotation.astype(dt)
    t = cam.translation.astype(dt)

    qn = quat.normalize(cloud.rotations)
    R_q = quat.to_matrix(qn)
    t_u, t_v, t_w = R_q[:, :, 0], R_q[:, :, 1], R_q[:, :, 2]
    s = np.exp(cloud.log_scales)
    alpha = np.minimum(sigmoid(cloud.opacity_logits), dt.type(OPACITY_MAX))

    p_cam = cloud.positions @ R.T + t
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    valid = z > near
    zs = np.where(valid, z, dt.type(1.0))

    cov_w = (
        (s[:, 0] ** 2)[:, None, None] * t_u[:, :, None] * t_u[:, None, :]
        + (s[:, 1] ** 2)[:, None, None] * t_v[:, :, None] * t_v[:, None, :]
    )
    cov_cam = np.einsum("ij,njk,lk->nil", R, cov_w, R)

    J = np.zeros((n, 2, 3), dtype=dt)
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2

    full2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov2d = np.stack(
        [full2d[:, 0, 0] + dilation, full2d[:, 0, 1], full2d[:, 1, 1] + dilation],
        axis=-1,
    ).astype(dt)
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)

    mu = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=-1)
    n_cam = t_w @ R.T
    radii = 3.0 * np.sqrt(np.maximum(np.stack([a, c], axis=-1), 0.0))

    if sh_mode == "camera":
        dirs = cloud.positions - cam.center.astype(dt)
    else:  # fixed view axis; no direction gradients
        dirs = np.zeros_like(cloud.positions)
        dirs[:, 2] = 1.0
    dir_norm = np.linalg.norm(dirs, axis=-1)
    dir_norm = np.where(dir_norm > 0, dir_norm, dt.type(1.0))
    dirs_n = dirs / dir_norm[:, None]
    color = sh.eval_color(cloud.sh_coeffs, dirs_n)

    return SplatCache(
        valid=valid, mu=mu, conic=conic, alpha=alpha, color=color,
        z=z, n_cam=n_cam, radii=radii,
        qn=qn, R_q=R_q, s=s, p_cam=p_cam, J=J,
        cov_w=cov_w, cov_cam=cov_cam, cov2d=cov2d,
        dirs=dirs_n, dir_norm=dir_norm, sh_mode=sh_mode,
    )


def prepare_splats_vjp(cloud, cam, cache, d_mu, d_conic, d_alpha, d_color,
                       d_z, d_ncam):
    """Chain per-splat gradients to surfel parameters.

    Returns (d_position, d_rotation, d_log_scales, d_opacity_logit, d_sh).
    """
    dt = cloud.dtype
    R = cam.rotation.astype(dt)
    v = cache.valid
    a, b, c = cache.cov2d[:, 0], cache.cov2d[:, 1], cache.cov2d[:, 2]
    det = a * c - b * b
    det2 = det * det
    dA, dB, dC = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]

    # conic -> 2D covariance entries (scalar chain; B counts both off-diags)
    d_a = dA * (-c * c / det2) + dB * (b * c / det2) + dC * (-b * b / det2)
    d_b = dA * (2 * b * c / det2) + dB * (-(a * c + b * b) / det2) + dC * (2 * a * b / det2)
    d_c = dA * (-b * b / det2) + dB * (a * b / det2) + dC * (-a * a / det2)

    M = np.zeros((len(cloud), 2, 2), dtype=dt)
    M[:, 0, 0] = d_a
    M[:, 0, 1] = d_b / 2
    M[:, 1, 0] = d_b / 2
    M[:, 1, 1] = d_c

    J = cache.J
    d_cov_cam = np.einsum("nji,njk,nkl->nil", J, M, J)
    d_J = 2.0 * np.einsum("nij,njk,nkl->nil", M, J, cache.cov_cam)
    d_cov_w = np.einsum("ji,njk,kl->nil", R, d_cov_cam, R)

    # p_cam gradient: projection, depth compositing, and the J dependence
    x, y, z = cache.p_cam[:, 0], cache.p_cam[:, 1], cache.p_cam[:, 2]
    zs = np.where(v, z, dt.type(1.0))
    d_pc = np.zeros_like(cache.p_cam)
    d_pc[:, 0] = d_mu[:, 0] * cam.fx / zs
    d_pc[:, 1] = d_mu[:, 1] * cam.fy / zs
    d_pc[:, 2] = (
        -d_mu[:, 0] * cam.fx * x / zs**2
        - d_mu[:, 1] * cam.fy * y / zs**2
        + d_z
    )
    d_pc[:, 0] += d_J[:, 0, 2] * (-cam.fx / zs**2)
    d_pc[:, 1] += d_J[:, 1, 2] * (-cam.fy / zs**2)
    d_pc[:, 2] += (
        d_J[:, 0, 0] * (-cam.fx / zs**2)
        + d_J[:, 0, 2] * (2 * cam.fx * x / zs**3)
        + d_J[:, 1, 1] * (-cam.fy / zs**2)
        + d_J[:, 1, 2] * (2 * cam.fy * y / zs**3)
    )
    d_position = d_pc @ R

    # SH color: coefficients and, in camera mode, the view direction
    d_sh_coeffs, d_dir = sh.eval_color_vjp(cloud.sh_coeffs, cache.dirs, d_color)
    if cache.sh_mode == "camera":
        dn = cache.dirs
        d_dir_raw = (d_dir - dn * np.sum(dn * d_dir, axis=-1, keepdims=True))
        d_position += d_dir_raw / cache.dir_norm[:, None]

    # covariance -> scales and tangent frame
    s = cache.s
    t_u, t_v = cache.R_q[:, :, 0], cache.R_q[:, :, 1]
    M2 = 0.5 * (d_cov_w + np.swapaxes(d_cov_w, 1, 2))
    Mu = np.einsum("nij,nj->ni", M2, t_u)
    Mv = np.einsum("nij,nj->ni", M2, t_v)
    d_su = 2 * s[:, 0] * np.sum(t_u * Mu, axis=-1)
    d_sv = 2 * s[:, 1] * np.sum(t_v * Mv, axis=-1)
    d_log_scales = np.stack([d_su * s[:, 0], d_sv * s[:, 1]], axis=-1)
    d_tu = 2 * (s[:, 0] ** 2)[:, None] * Mu
    d_tv = 2 * (s[:, 1] ** 2)[:, None] * Mv
    d_tw = d_ncam @ R

    d_Rq = np.stack([d_tu, d_tv, d_tw], axis=-1)
    d_qn = quat.to_matrix_vjp(cache.qn, d_Rq)
    d_rotation = quat.normalize_vjp(cloud.rotations, d_qn)

    sig = sigmoid(cloud.opacity_logits)
    d_opacity = np.where(sig < OPACITY_MAX, d_alpha * sig * (1 - sig), 0.0)

    inv = ~v
    d_position[inv] = 0
    d_rotation[inv] = 0
    d_log_scales[inv] = 0
    d_opacity[inv] = 0
    d_sh_coeffs[inv] = 0
    return d_position, d_rotation, d_log_scales, d_opacity.astype(dt), d_sh_coeffs
