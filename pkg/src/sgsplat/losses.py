"""Loss terms of the composite objective, each with analytic gradients.

All pixel losses are mean-normalized and skip tool-masked pixels; the
locality losses are edge-normalized. Every term returns (value, grads)
so the trainer can assemble the weighted total and push gradients back
through the rasterizer and the deformation network.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ConfigurationError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class LossWeights:
    """Objective weights; the normal weight is not pinned by the defaults
    of the rest and stays configurable."""
    lambda_ssim: float = 0.2
    lambda_smooth: float = 0.006
    lambda_pos: float = 1.0
    lambda_cov: float = 200.0
    lambda_per: float = 1.0
    lambda_depth: float = 0.0001
    lambda_normal: float = 0.01
    alpha_n: float = 0.6
    beta_n: float = 0.4

    def validate(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if abs(self.alpha_n + self.beta_n - 1.0) > 1e-9:
            raise ConfigurationError("normal target weights must sum to 1")


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_with_grad(x, y, kernel):
    """Mean SSIM over valid windows of one channel and dL/dx of (1 - mean)."""
    conv = lambda im: convolve2d(im, kernel, mode="valid")
    mu_x = conv(x)
    mu_y = conv(y)
    sxx = conv(x * x) - mu_x ** 2
    syy = conv(y * y) - mu_y ** 2
    sxy = conv(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    n = s.size
    # d(1 - mean S)/dS = -1/n; chain through the five statistics maps
    u = -1.0 / n
    d_a1 = u * a2 / (b1 * b2)
    d_a2 = u * a1 / (b1 * b2)
    d_b1 = u * (-s / b1)
    d_b2 = u * (-s / b2)
    d_mu_x = d_a1 * 2.0 * mu_y + d_b1 * 2.0 * mu_x
    d_sxy = d_a2 * 2.0
    d_sxx = d_b2
    # statistics -> x (mu_y, syy carry no x dependence)
    d_mu_x = d_mu_x - 2.0 * mu_x * d_sxx - mu_y * d_sxy
    tconv = lambda g: convolve2d(g, kernel, mode="full")
    d_x = tconv(d_mu_x) + 2.0 * x * tconv(d_sxx) + y * tconv(d_sxy)
    return s.mean(), d_x


def loss_photometric(image, rendered, tool_mask=None, lambda_ssim=0.2):
    """(1-λ)·L1 + λ·(1-SSIM) over non-masked pixels.

    Masked pixels are treated as perfectly reconstructed (prediction
    replaced by the target), which removes them from both terms and
    zeroes their gradient.
    """
    image = np.asarray(image)
    pred = np.asarray(rendered)
    h, w = image.shape[:2]
    if tool_mask is None:
        keep = np.ones((h, w), dtype=bool)
    else:
        keep = np.asarray(tool_mask) == 0
    n_keep = int(keep.sum())
    if n_keep == 0:
        warnings.warn("photometric loss: image fully tool-masked")
        return 0.0, np.zeros_like(pred)
    eff = np.where(keep[..., None], pred, image)

    diff = eff - image
    l1 = np.abs(diff).sum() / (n_keep * image.shape[2])
    d_l1 = np.sign(diff) / (n_keep * image.shape[2])

    value = (1.0 - lambda_ssim) * l1
    grad = (1.0 - lambda_ssim) * d_l1
    if lambda_ssim > 0:
        kernel = _gaussian_kernel()
        ssim_sum = 0.0
        for c in range(image.shape[2]):
            s_mean, d_x = _ssim_with_grad(eff[..., c], image[..., c], kernel)
            ssim_sum += s_mean
            grad[..., c] += lambda_ssim * d_x / image.shape[2]
        value += lambda_ssim * (1.0 - ssim_sum / image.shape[2])
    grad *= keep[..., None]
    return value, grad


def loss_tv(rendered, tool_mask=None):
    """Anisotropic total variation, mean-normalized by pixel count.

    Differences touching a tool-masked pixel are dropped.
    """
    x = np.asarray(rendered)
    h, w = x.shape[:2]
    if tool_mask is None:
        keep = np.ones((h, w), dtype=bool)
    else:
        keep = np.asarray(tool_mask) == 0
    norm = h * w
    grad = np.zeros_like(x)
    value = 0.0
    dy = x[1:, :] - x[:-1, :]
    ky = (keep[1:, :] & keep[:-1, :])[..., None]
    value += np.abs(dy)[np.broadcast_to(ky, dy.shape)].sum()
    sy = np.sign(dy) * ky
    grad[1:, :] += sy
    grad[:-1, :] -= sy
    dx = x[:, 1:] - x[:, :-1]
    kx = (keep[:, 1:] & keep[:, :-1])[..., None]
    value += np.abs(dx)[np.broadcast_to(kx, dx.shape)].sum()
    sx = np.sign(dx) * kx
    grad[:, 1:] += sx
    grad[:, :-1] -= sx
    return value / norm, grad / norm


def loss_locality(pos, scale, pos_def, scale_def, neighbors):
    """Pairwise-distance preservation between canonical and deformed states.

    neighbors: (N, k) int array of canonical nearest neighbors.
    Returns (l_pos, l_cov, grads) where grads is a dict with keys
    'pos', 'scale', 'pos_def', 'scale_def'.
    """
    n = pos.shape[0]
    grads = {
        "pos": np.zeros_like(pos),
        "scale": np.zeros_like(scale),
        "pos_def": np.zeros_like(pos_def),
        "scale_def": np.zeros_like(scale_def),
    }
    if n < 2 or neighbors.size == 0:
        return 0.0, 0.0, grads
    i = np.repeat(np.arange(n), neighbors.shape[1])
    j = neighbors.ravel()
    m = i.size

    def term(a, b, g_a, g_b):
        da = a[i] - a[j]
        db = b[i] - b[j]
        va = np.abs(da).sum(axis=1)
        vb = np.abs(db).sum(axis=1)
        diff = va - vb
        sgn = np.sign(diff)[:, None]
        ga_edge = sgn * np.sign(da) / m
        gb_edge = -sgn * np.sign(db) / m
        np.add.at(g_a, i, ga_edge)
        np.add.at(g_a, j, -ga_edge)
        np.add.at(g_b, i, gb_edge)
        np.add.at(g_b, j, -gb_edge)
        return np.abs(diff).sum() / m

    l_pos = term(pos, pos_def, grads["pos"], grads["pos_def"])
    l_cov = term(scale, scale_def, grads["scale"], grads["scale_def"])
    return l_pos, l_cov, grads


def loss_depth(pred, target, valid_mask):
    """Mean L1 depth error over jointly valid pixels."""
    valid = np.asarray(valid_mask, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        warnings.warn("depth loss: no valid pixels")
        return 0.0, np.zeros_like(pred)
    diff = np.where(valid, pred - target, 0.0)
    grad = np.sign(diff) / n
    return np.abs(diff).sum() / n, grad


def _unit_with_vjp(v, eps=1e-12):
    """Normalize rows of an (..., 3) field; returns (unit, norm)."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.maximum(n, eps)
    return v / safe, safe


def _unit_vjp(v, safe_norm, d_unit):
    u = v / safe_norm
    return (d_unit - u * (u * d_unit).sum(axis=-1, keepdims=True)) / safe_norm


def expected_normals(depth, cam, eps=1e-12):
    """Normals from central differences of back-projected depth.

    Returns (raw_normals, cache) where raw_normals is the unnormalized
    cross product (zero on the border).
    """
    h, w = depth.shape
    xs = (np.arange(w) - cam.cx) / cam.fx
    ys = (np.arange(h) - cam.cy) / cam.fy
    rx, ry = np.meshgrid(xs, ys)
    p = np.stack([rx * depth, ry * depth, depth], axis=-1)
    tx = np.zeros_like(p)
    ty = np.zeros_like(p)
    tx[:, 1:-1] = 0.5 * (p[:, 2:] - p[:, :-2])
    ty[1:-1, :] = 0.5 * (p[2:, :] - p[:-2, :])
    # ty x tx faces the camera (negative z for a front-parallel surface)
    raw = np.cross(ty, tx)
    return raw, (p, tx, ty, rx, ry)


def expected_normals_vjp(d_raw, cache):
    """Chain a gradient wrt the raw cross-product field back to depth."""
    p, tx, ty, rx, ry = cache
    d_ty = np.cross(tx, d_raw)
    d_tx = np.cross(d_raw, ty)
    d_p = np.zeros_like(p)
    d_p[:, 2:] += 0.5 * d_tx[:, 1:-1]
    d_p[:, :-2] -= 0.5 * d_tx[:, 1:-1]
    d_p[2:, :] += 0.5 * d_ty[1:-1, :]
    d_p[:-2, :] -= 0.5 * d_ty[1:-1, :]
    return d_p[..., 0] * rx + d_p[..., 1] * ry + d_p[..., 2]


def loss_normal(normal_raw, depth, median_normal, cam, valid_mask,
                alpha_n=0.6, beta_n=0.4):
    """Two-target cosine loss on the rendered normals.

    normal_raw: (H, W, 3) unnormalized accumulated normals;
    median_normal: (H, W, 3) per-pixel max-weight surfel normal;
    valid_mask: bool (H, W) (rendered alpha > 0.5, not tool-masked).
    Degenerate targets or renderings are excluded from the mean.
    Returns (value, d_normal_raw, d_depth, d_median_normal).
    """
    exp_raw, cache = expected_normals(depth, cam)
    eps = 1e-12
    nr_n = np.linalg.norm(normal_raw, axis=-1)
    nm_n = np.linalg.norm(median_normal, axis=-1)
    ne_n = np.linalg.norm(exp_raw, axis=-1)
    ok = np.asarray(valid_mask, bool) & (nr_n > eps)
    ok_m = ok & (nm_n > eps)
    ok_e = ok & (ne_n > eps)

    d_raw = np.zeros_like(normal_raw)
    d_med = np.zeros_like(median_normal)
    d_exp_raw = np.zeros_like(exp_raw)

    u_r, s_r = _unit_with_vjp(normal_raw)
    u_m, s_m = _unit_with_vjp(median_normal)
    u_e, s_e = _unit_with_vjp(exp_raw)

    value = 0.0
    n_m = int(ok_m.sum())
    if n_m > 0:
        cos_m = (u_r * u_m).sum(axis=-1)
        value += alpha_n * (1.0 - cos_m[ok_m].mean())
        g = np.where(ok_m, -alpha_n / n_m, 0.0)[..., None]
        d_raw += _unit_vjp(normal_raw, s_r, g * u_m)
        d_med += _unit_vjp(median_normal, s_m, g * u_r)
    n_e = int(ok_e.sum())
    if n_e > 0:
        cos_e = (u_r * u_e).sum(axis=-1)
        value += beta_n * (1.0 - cos_e[ok_e].mean())
        g = np.where(ok_e, -beta_n / n_e, 0.0)[..., None]
        d_raw += _unit_vjp(normal_raw, s_r, g * u_e)
        d_exp_raw += _unit_vjp(exp_raw, s_e, g * u_r)
    d_depth = expected_normals_vjp(d_exp_raw, cache)
    return value, d_raw, d_depth, d_med


# ---- perceptual term -----------------------------------------------------

def _avgpool2(x):
    h, w = x.shape[:2]
    h2, w2 = h // 2, w // 2
    x = x[: 2 * h2, : 2 * w2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _avgpool2_vjp(g, shape):
    out = np.zeros(shape, dtype=g.dtype)
    h2, w2 = g.shape[:2]
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy:2 * h2:2, dx:2 * w2:2] += 0.25 * g
    return out


def gradient_pyramid_features(image, levels=3, eps=1e-12):
    """Default feature map: per-level forward-difference gradient magnitude
    of an average-pooled pyramid, concatenated flat.

    Returns (features, cache) so the VJP can replay the chain.
    """
    feats = []
    cache = []
    x = np.asarray(image, dtype=np.float64)
    for lvl in range(levels):
        gx = np.zeros_like(x)
        gy = np.zeros_like(x)
        gx[:, :-1] = x[:, 1:] - x[:, :-1]
        gy[:-1, :] = x[1:, :] - x[:-1, :]
        mag = np.sqrt(gx * gx + gy * gy + eps)
        feats.append(mag.ravel())
        cache.append((x.shape, gx, gy, mag))
        if lvl < levels - 1:
            x = _avgpool2(x)
    return np.concatenate(feats), cache


def gradient_pyramid_features_vjp(d_feats, cache):
    """Gradient of the default feature map wrt the input image."""
    levels = len(cache)
    # split the flat gradient back into per-level maps
    parts = []
    off = 0
    for shape, gx, gy, mag in cache:
        n = int(np.prod(shape))
        parts.append(d_feats[off:off + n].reshape(shape))
        off += n
    d_x_next = None
    for lvl in range(levels - 1, -1, -1):
        shape, gx, gy, mag = cache[lvl]
        d_mag = parts[lvl].copy()
        if d_x_next is not None:
            d_from_pool = _avgpool2_vjp(d_x_next, shape)
        else:
            d_from_pool = 0.0
        d_gx = d_mag * gx / mag
        d_gy = d_mag * gy / mag
        d_x = np.zeros(shape)
        d_x[:, 1:] += d_gx[:, :-1]
        d_x[:, :-1] -= d_gx[:, :-1]
        d_x[1:, :] += d_gy[:-1, :]
        d_x[:-1, :] -= d_gy[:-1, :]
        d_x += d_from_pool
        d_x_next = d_x
    return d_x_next


def loss_perceptual(image, rendered, tool_mask=None, extractor=None):
    """1 - cosine similarity of feature embeddings.

    extractor: optional callable returning (features, vjp) where
    vjp(d_features) -> d_image; defaults to the gradient pyramid.
    Tool-masked pixels are zeroed in both images first.
    """
    image = np.asarray(image, dtype=np.float64)
    pred = np.asarray(rendered, dtype=np.float64)
    if tool_mask is not None:
        keep = (np.asarray(tool_mask) == 0)[..., None]
        image = image * keep
        pred = pred * keep
    else:
        keep = None

    if extractor is None:
        f_i, _ = gradient_pyramid_features(image)
        f_p, cache_p = gradient_pyramid_features(pred)
        vjp = lambda g: gradient_pyramid_features_vjp(g, cache_p)
    else:
        f_i, _ = extractor(image)
        f_p, vjp = extractor(pred)

    eps = 1e-12
    ni = np.linalg.norm(f_i)
    np_ = np.linalg.norm(f_p)
    if ni < eps or np_ < eps:
        return 0.0, np.zeros_like(pred)
    cos = float(f_p @ f_i) / (ni * np_)
    # d(1-cos)/df_p
    d_fp = -(f_i / (ni * np_) - cos * f_p / (np_ ** 2))
    grad = vjp(d_fp)
    if keep is not None:
        grad = grad * keep
    return 1.0 - cos, grad
