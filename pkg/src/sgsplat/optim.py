"""Training: total objective assembly, Adam, densification, the loop.

The total loss chains the per-term gradients through the rasterizer
backward pass, the deformation update and the deformation network, so a
single call yields gradients for every surfel parameter group and every
network weight.
"""

import csv
import os
import warnings
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
from scipy.spatial import cKDTree

from . import quaternion as quat
from .deform import (
    DeformationNetwork,
    decode_delta,
    decode_delta_vjp,
    encode,
    encode_vjp,
    save_sgsw,
)
from .errors import ConfigurationError, OptimizationError
from .losses import (
    LossWeights,
    loss_depth,
    loss_locality,
    loss_normal,
    loss_perceptual,
    loss_photometric,
    loss_tv,
)
from .metrics import psnr
from .raster import RenderGrad, render, render_backward
from .surfel import (
    SurfelCloud,
    apply_deformation,
    basis_from_quaternion,
    save_sgsc,
    surfel_normals,
)

ADAM_EPS = 1e-15
LOG_COLUMNS = [
    "iteration", "l_photo", "l_tv", "l_pos", "l_cov", "l_per",
    "l_depth", "l_normal", "total", "psnr_holdout",
]


@dataclass
class TrainConfig:
    iterations: int = 3000
    seed: int = 0
    warmup: int = 500
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_size_fraction: float = 0.01   # of the scene diagonal
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    prune_scale_fraction: float = 0.1     # of the scene diagonal
    k_neighbors: int = 5
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    stride: int = 2
    sh_degree: int = 3
    log_interval: int = 10
    eval_interval: int = 250
    checkpoint_interval: int = 1000
    perceptual: str = "builtin"           # builtin | none
    deterministic: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string key/value pairs (config file or CLI)."""
        cfg = cls()
        wfields = {f.name: f.type for f in dc_fields(LossWeights)}
        for key, value in mapping.items():
            if hasattr(cfg, key) and key != "weights":
                cur = getattr(cfg, key)
                if isinstance(cur, bool):
                    setattr(cfg, key, value.lower() in ("1", "true", "yes"))
                elif isinstance(cur, int):
                    setattr(cfg, key, int(value))
                elif isinstance(cur, float):
                    setattr(cfg, key, float(value))
                else:
                    setattr(cfg, key, value)
            elif key in wfields:
                setattr(cfg.weights, key, float(value))
            else:
                raise ConfigurationError(f"unknown config key: {key}")
        cfg.weights.validate()
        return cfg

    def lr_position_at(self, iteration):
        frac = iteration / max(self.iterations, 1)
        return self.lr_position * (self.lr_position_final / self.lr_position) ** frac


@dataclass
class NeighborGraph:
    """k nearest canonical neighbors per surfel, no self-loops."""
    neighbors: np.ndarray  # (N, k') int32
    k: int

    @classmethod
    def build(cls, positions, k=5):
        n = positions.shape[0]
        kk = min(k, n - 1)
        if kk < 1:
            return cls(np.zeros((n, 0), np.int32), k)
        tree = cKDTree(positions)
        _, idx = tree.query(positions, k=kk + 1)
        idx = np.atleast_2d(idx)
        out = np.empty((n, kk), np.int32)
        for i in range(n):
            row = idx[i][idx[i] != i][:kk]
            out[i, :row.size] = row
            if row.size < kk:  # duplicate points can shadow the self index
                out[i, row.size:] = row[-1] if row.size else (i + 1) % n
        return cls(out, k)


class Adam:
    """Two-moment optimizer with per-group state and non-finite skips."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}
        self.skipped = 0

    def step(self, name, param, grad, lr):
        """Returns the updated parameter (input not modified)."""
        grad = np.asarray(grad)
        if name not in self.m:
            self.m[name] = np.zeros_like(param, dtype=np.float64)
            self.v[name] = np.zeros_like(param, dtype=np.float64)
            self.t[name] = 0
        if not np.isfinite(grad).all():
            self.skipped += 1
            return param
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return (param - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
            param.dtype, copy=False
        )

    def reindex(self, name, keep_index, n_new):
        """Keep state rows for survivors, zero-init rows for new surfels."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            old = store[name]
            fresh = np.zeros((keep_index.size + n_new,) + old.shape[1:], old.dtype)
            fresh[: keep_index.size] = old[keep_index]
            store[name] = fresh


@dataclass
class SceneNormalizer:
    """Maps world positions into the network's [-1, 1] box."""
    center: np.ndarray
    half_extent: float
    diagonal: float

    @classmethod
    def from_positions(cls, positions, margin=1.25):
        lo = positions.min(axis=0)
        hi = positions.max(axis=0)
        diag = float(np.linalg.norm(hi - lo))
        half = float(max((hi - lo).max() / 2.0, 1e-6)) * margin
        return cls(center=(lo + hi) / 2.0, half_extent=half, diagonal=max(diag, 1e-9))

    def normalize(self, p):
        return (p - self.center) / self.half_extent

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("center: "
                     + " ".join(repr(float(v)) for v in self.center) + "\n")
            fh.write(f"half_extent: {self.half_extent!r}\n")
            fh.write(f"diagonal: {self.diagonal!r}\n")

    @classmethod
    def load(cls, path):
        kv = {}
        try:
            with open(path) as fh:
                for line in fh:
                    key, _, value = line.partition(":")
                    kv[key.strip()] = value.strip()
            return cls(
                center=np.array([float(v) for v in kv["center"].split()]),
                half_extent=float(kv["half_extent"]),
                diagonal=float(kv["diagonal"]),
            )
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigurationError(f"bad scene file {path}: {exc}") from exc


@dataclass
class StepReport:
    total: float
    terms: dict
    grads: dict          # surfel parameter gradients (canonical space)
    d_mlp_w: np.ndarray  # flat
    d_mlp_b: np.ndarray
    homo_grad: np.ndarray
    touch_count: np.ndarray
    output: object       # RenderOutput


def deform_cloud(cloud, net, normalizer, t, use_reference=False):
    """Evaluate the deformation field at time t and apply it.

    Returns (deformed_cloud, encoded, raw) for reuse by the backward pass.
    """
    p_norm = normalizer.normalize(cloud.positions)
    enc = encode(p_norm, t, net.config)
    if use_reference or cloud.dtype == np.float64:
        raw = net.forward_reference(enc)
    else:
        raw = net.forward_fused(enc.astype(np.float32))
    raw = raw.astype(cloud.dtype)
    delta = decode_delta(raw)
    deformed = apply_deformation(cloud, delta, validate=False)
    return deformed, enc, raw


def loss_total(cloud, net, frame, cam, normalizer, graph, weights,
               background=(0.0, 0.0, 0.0), sh_mode="camera",
               extractor="builtin", use_reference_mlp=False):
    """Full objective and its gradients wrt canonical surfels and the MLP."""
    dt = cloud.dtype
    deformed, enc, raw = deform_cloud(cloud, net, normalizer,
                                      frame.timestamp,
                                      use_reference=use_reference_mlp)
    out = render(deformed, cam, sh_mode=sh_mode, background=background)
    keep = frame.tool_mask == 0

    l_photo, g_color = loss_photometric(frame.image, out.color,
                                        frame.tool_mask, weights.lambda_ssim)
    l_tv, g_tv = loss_tv(out.color, frame.tool_mask)

    depth_valid = (out.alpha > 0.5) & keep & np.isfinite(frame.depth)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        l_depth, g_depth = loss_depth(out.depth, frame.depth, depth_valid)

    # per-pixel max-weight surfel normal, in camera space
    n_cam_all = surfel_normals(deformed) @ cam.rotation.T
    med_map = np.zeros(out.normal.shape, dt)
    has_med = out.argmax_index >= 0
    med_map[has_med] = n_cam_all[out.argmax_index[has_med]]
    normal_valid = (out.alpha > 0.5) & keep
    l_normal, d_nraw, d_depth_n, d_med = loss_normal(
        out.normal, out.depth, med_map, cam, normal_valid,
        weights.alpha_n, weights.beta_n,
    )

    if weights.lambda_per > 0:
        if extractor is None:
            raise ConfigurationError(
                "perceptual weight is positive but no feature extractor is set"
            )
        ext = None if extractor == "builtin" else extractor
        l_per, g_per = loss_perceptual(frame.image, out.color,
                                       frame.tool_mask, ext)
    else:
        l_per, g_per = 0.0, 0.0

    scales = cloud.scales()
    scales_def = deformed.scales()
    l_pos, l_cov, loc_g = loss_locality(
        cloud.positions, scales, deformed.positions, scales_def,
        graph.neighbors,
    )

    w = weights
    total = (l_photo + w.lambda_smooth * l_tv + w.lambda_pos * l_pos
             + w.lambda_cov * l_cov + w.lambda_per * l_per
             + w.lambda_depth * l_depth + w.lambda_normal * l_normal)

    d_out = RenderGrad(
        d_color=g_color + w.lambda_smooth * g_tv + w.lambda_per * g_per,
        d_depth=w.lambda_depth * g_depth + w.lambda_normal * d_depth_n,
        d_normal=w.lambda_normal * d_nraw,
        d_alpha=None,
        d_median_normal=w.lambda_normal * d_med,
    )
    buf = render_backward(deformed, cam, out, d_out, sh_mode=sh_mode,
                          background=background)

    # gradients wrt the deformed cloud
    d_def_pos = buf.d_position + w.lambda_pos * loc_g["pos_def"]
    d_def_ls = buf.d_log_scales + w.lambda_cov * loc_g["scale_def"] * scales_def
    d_def_rot = buf.d_rotation

    # chain through the deformation update
    delta = decode_delta(raw)
    d_dx = d_def_pos.copy()
    d_pos = d_def_pos.copy()
    d_ls = d_def_ls.copy()
    d_ds = np.zeros((len(cloud), 3), dt)
    d_ds[:, :2] = d_def_ls / delta.d_scale[:, :2]
    d_q, d_dq = quat.multiply_vjp(cloud.rotations, delta.d_rotation,
                                  d_def_rot)

    d_raw = decode_delta_vjp(raw, d_dx, d_dq, d_ds)
    if use_reference_mlp or dt == np.float64:
        d_w_layers, d_b_layers, d_enc = net.backward(enc, d_raw)
        d_mlp_w = np.concatenate([g.ravel() for g in d_w_layers])
        d_mlp_b = np.concatenate(d_b_layers)
    else:
        d_mlp_w, d_mlp_b, d_enc = net.backward_fused(
            enc.astype(np.float32), d_raw.astype(np.float32))
    p_norm = normalizer.normalize(cloud.positions)
    d_pn, _ = encode_vjp(p_norm, frame.timestamp, d_enc, net.config)
    d_pos = d_pos + d_pn / normalizer.half_extent

    grads = {
        "positions": d_pos + w.lambda_pos * loc_g["pos"],
        "rotations": d_q,
        "log_scales": d_ls + w.lambda_cov * loc_g["scale"] * scales,
        "opacity_logits": buf.d_opacity,
        "sh_coeffs": buf.d_sh,
    }
    terms = {
        "l_photo": l_photo, "l_tv": l_tv, "l_pos": l_pos, "l_cov": l_cov,
        "l_per": l_per, "l_depth": l_depth, "l_normal": l_normal,
    }
    return StepReport(float(total), terms, grads, d_mlp_w, d_mlp_b,
                      buf.homo_grad, buf.touch_count, out)


def densify_and_prune(cloud, adam, homo_grad, touch_count, config,
                      scene_diagonal, rng):
    """Split/clone high-gradient surfels, prune weak or oversized ones.

    Returns (cloud, graph, stats).
    """
    n = len(cloud)
    touch = np.maximum(touch_count, 1)
    mean_grad = homo_grad / touch
    dense = mean_grad > config.densify_grad_threshold
    max_scale = cloud.scales().max(axis=1)
    split = dense & (max_scale > config.densify_size_fraction * scene_diagonal)
    clone = dense & ~split

    prune = (cloud.opacities() < config.prune_opacity) | (
        max_scale > config.prune_scale_fraction * scene_diagonal
    )
    survivors = ~(split | prune)
    keep_idx = np.nonzero(survivors)[0]

    pieces = [cloud.select(keep_idx)]
    n_new = 0
    clone_keep = clone & survivors
    if clone_keep.any():
        pieces.append(cloud.select(np.nonzero(clone_keep)[0]))
        n_new += int(clone_keep.sum())
    split_idx = np.nonzero(split & ~prune)[0]
    if split_idx.size:
        parents = cloud.select(np.repeat(split_idx, 2))
        t_u, t_v, _ = basis_from_quaternion(parents.rotations)
        s = parents.scales()
        uv = rng.standard_normal((len(parents), 2)).astype(cloud.dtype)
        parents.positions = (
            parents.positions
            + (s[:, 0] * uv[:, 0])[:, None] * t_u.astype(cloud.dtype)
            + (s[:, 1] * uv[:, 1])[:, None] * t_v.astype(cloud.dtype)
        )
        parents.log_scales = parents.log_scales - np.log(
            config.split_factor
        ).astype(cloud.dtype)
        pieces.append(parents)
        n_new += len(parents)

    new_cloud = SurfelCloud.concatenate(pieces)
    for name in ("positions", "rotations", "log_scales",
                 "opacity_logits", "sh_coeffs"):
        adam.reindex(name, keep_idx, n_new)
    graph = NeighborGraph.build(new_cloud.positions, config.k_neighbors)
    stats = {
        "split": int(split_idx.size), "cloned": int(clone_keep.sum()),
        "pruned": int(prune.sum()), "count": len(new_cloud),
    }
    return new_cloud, graph, stats


def _holdout_psnr(cloud, net, normalizer, dataset, background, sh_mode):
    vals = []
    for i in dataset.test_indices:
        frame = dataset.frames[i]
        deformed, _, _ = deform_cloud(cloud, net, normalizer, frame.timestamp)
        out = render(deformed, dataset.camera, sh_mode=sh_mode,
                     background=background)
        vals.append(psnr(frame.image, out.color, frame.tool_mask, cap=True))
    return float(np.mean(vals)) if vals else float("nan")


def _dump_divergence(frame, cloud, terms):
    stats = {
        name: (float(np.min(a)), float(np.max(a)))
        for name, a in (
            ("positions", cloud.positions), ("log_scales", cloud.log_scales),
            ("opacity_logits", cloud.opacity_logits),
        )
    }
    return (f"non-finite loss at frame {frame.index} (t={frame.timestamp}); "
            f"terms={terms}; param ranges={stats}")


def save_checkpoint(out_dir, cloud, net, normalizer):
    os.makedirs(out_dir, exist_ok=True)
    save_sgsc(os.path.join(out_dir, "surfels.sgsc"), cloud)
    save_sgsw(os.path.join(out_dir, "deform.sgsw"), net)
    normalizer.save(os.path.join(out_dir, "scene.txt"))


def load_checkpoint(out_dir):
    """Returns (cloud, net, normalizer) from a checkpoint directory."""
    from .deform import load_sgsw
    from .surfel import load_sgsc

    cloud = load_sgsc(os.path.join(out_dir, "surfels.sgsc"))
    net = load_sgsw(os.path.join(out_dir, "deform.sgsw"))
    normalizer = SceneNormalizer.load(os.path.join(out_dir, "scene.txt"))
    return cloud, net, normalizer


def train(dataset, config, out_dir, cloud=None, net=None,
          background=(0.0, 0.0, 0.0), sh_mode="camera", progress=None):
    """Optimize a surfel cloud + deformation network on a dataset.

    Writes periodic checkpoints and a metric CSV into out_dir; returns
    (cloud, net, log_rows).
    """
    from . import pimi

    rng = np.random.default_rng(config.seed)
    train_frames = [dataset.frames[i] for i in dataset.train_indices]
    cam = dataset.camera
    if cloud is None:
        cloud = pimi.initialize(train_frames, cam, stride=config.stride,
                                sh_degree=config.sh_degree)
    if net is None:
        net = DeformationNetwork.create(rng)
    extractor = None if config.perceptual == "none" else "builtin"

    normalizer = SceneNormalizer.from_positions(cloud.positions)
    graph = NeighborGraph.build(cloud.positions, config.k_neighbors)
    adam = Adam(config.beta1, config.beta2)
    homo = np.zeros(len(cloud))
    touch = np.zeros(len(cloud), np.int64)

    os.makedirs(out_dir, exist_ok=True)
    log_rows = []
    holdout = float("nan")
    lr_map = {
        "rotations": config.lr_rotation, "log_scales": config.lr_scale,
        "opacity_logits": config.lr_opacity, "sh_coeffs": config.lr_sh,
    }

    for it in range(config.iterations):
        frame = train_frames[int(rng.integers(len(train_frames)))]
        report = loss_total(cloud, net, frame, cam, normalizer, graph,
                            config.weights, background=background,
                            sh_mode=sh_mode, extractor=extractor)
        if not np.isfinite(report.total):
            raise OptimizationError(_dump_divergence(frame, cloud,
                                                     report.terms))
        homo += report.homo_grad
        touch += report.touch_count

        cloud.positions = adam.step("positions", cloud.positions,
                                    report.grads["positions"],
                                    config.lr_position_at(it))
        for name, lr in lr_map.items():
            setattr(cloud, name,
                    adam.step(name, getattr(cloud, name),
                              report.grads[name], lr))
        cloud.normalize_rotations()
        fw = adam.step("mlp_w", net.flat_weights().astype(np.float64),
                       report.d_mlp_w, config.lr_mlp)
        fb = adam.step("mlp_b", net.flat_biases().astype(np.float64),
                       report.d_mlp_b, config.lr_mlp)
        net.set_flat(fw, fb)

        step = it + 1
        if (step > config.warmup and step % config.densify_interval == 0
                and step < config.iterations):
            cloud, graph, _ = densify_and_prune(
                cloud, adam, homo, touch, config, normalizer.diagonal, rng)
            homo = np.zeros(len(cloud))
            touch = np.zeros(len(cloud), np.int64)

        if step % config.eval_interval == 0 or step == config.iterations:
            holdout = _holdout_psnr(cloud, net, normalizer, dataset,
                                    background, sh_mode)
        if step % config.log_interval == 0 or step == config.iterations:
            row = [step] + [report.terms[k] for k in
                            ("l_photo", "l_tv", "l_pos", "l_cov", "l_per",
                             "l_depth", "l_normal")] + [report.total, holdout]
            log_rows.append(row)
            if progress is not None:
                progress(step, report.total, holdout)
        if step % config.checkpoint_interval == 0 and step < config.iterations:
            save_checkpoint(os.path.join(out_dir, f"iter_{step:06d}"),
                            cloud, net, normalizer)

    save_checkpoint(out_dir, cloud, net, normalizer)
    with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for row in log_rows:
            writer.writerow([
                row[0],
                *(f"{v:.8g}" for v in row[1:9]),
                f"{row[9]:.4f}",
            ])
    return cloud, net, log_rows
