"""Image-quality metrics on [0,1] images with optional occlusion masks."""

import numpy as np

from .losses import _gaussian_kernel, _ssim_with_grad

PSNR_CAP = 99.0


def psnr(image, rendered, mask=None, cap=False):
    """Peak signal-to-noise ratio in dB over unmasked pixels.

    mask follows the tool-mask convention (nonzero = excluded). Identical
    images give +inf; pass cap=True to clip at 99 dB for logs.
    """
    image = np.asarray(image, dtype=np.float64)
    pred = np.asarray(rendered, dtype=np.float64)
    if mask is None:
        keep = np.ones(image.shape[:2], dtype=bool)
    else:
        keep = np.asarray(mask) == 0
    if not keep.any():
        return np.inf if not cap else PSNR_CAP
    err = ((pred - image) ** 2)[keep].mean()
    if err == 0.0:
        return PSNR_CAP if cap else np.inf
    value = 10.0 * np.log10(1.0 / err)
    return min(value, PSNR_CAP) if cap else value


def ssim(image, rendered, mask=None):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) over channels.

    Masked pixels are replaced by the reference before windowing, the
    same convention the photometric loss uses.
    """
    image = np.asarray(image, dtype=np.float64)
    pred = np.asarray(rendered, dtype=np.float64)
    if mask is not None:
        keep = (np.asarray(mask) == 0)[..., None]
        pred = np.where(keep, pred, image)
    kernel = _gaussian_kernel()
    vals = [
        _ssim_with_grad(pred[..., c], image[..., c], kernel)[0]
        for c in range(image.shape[2])
    ]
    return float(np.mean(vals))


def normal_angular_error(normal_pred, normal_gt, valid_mask, degrees=True):
    """Mean angle between unit normal maps over valid pixels."""
    n1 = np.asarray(normal_pred, dtype=np.float64)
    n2 = np.asarray(normal_gt, dtype=np.float64)
    keep = np.asarray(valid_mask, dtype=bool)
    l1 = np.linalg.norm(n1, axis=-1)
    l2 = np.linalg.norm(n2, axis=-1)
    keep = keep & (l1 > 1e-9) & (l2 > 1e-9)
    if not keep.any():
        return np.nan
    cos = (n1 * n2).sum(axis=-1)[keep] / (l1[keep] * l2[keep])
    # surfel normals are orientation-free; compare up to sign
    ang = np.arccos(np.clip(np.abs(cos), -1.0, 1.0))
    return float(np.degrees(ang.mean())) if degrees else float(ang.mean())
