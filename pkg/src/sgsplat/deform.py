"""Frequency encoding and the fused deformation network.

The network maps an encoded (position, time) pair to a 10-dimensional raw
deformation output that decodes into a translation, a rotation delta and a
per-axis scale factor. A reference numpy path and a fused compiled path are
both provided; the fused path is selected automatically when available.
"""

import struct
import warnings

import numpy as np

from . import backend
from .errors import ConfigurationError
from .quaternion import normalize as q_normalize
from .quaternion import normalize_vjp as q_normalize_vjp
from .surfel import DeformationDelta

SGSW_MAGIC = b"SGSW"
SGSW_VERSION = 1

HIDDEN_WIDTH = 128
NUM_HIDDEN = 11
RAW_WIDTH = 10


class EncodingConfig:
    """Band counts for the positional/temporal frequency encoding."""

    def __init__(self, spatial_bands=10, temporal_bands=4, include_input=True):
        if spatial_bands < 0 or temporal_bands < 0:
            raise ConfigurationError("band counts must be non-negative")
        self.spatial_bands = spatial_bands
        self.temporal_bands = temporal_bands
        self.include_input = include_input

    @property
    def width(self):
        w = 3 * 2 * self.spatial_bands + 2 * self.temporal_bands
        if self.include_input:
            w += 4
        return w


def encode(p, t, config=None):
    """Frequency-encode positions (N,3) and times (N,) or scalar.

    Layout: [p, sin(2^0 pi p), cos(2^0 pi p), ..., t, sin(2^0 pi t),
    cos(2^0 pi t), ...]. Positions outside [-1,1]^3 are clamped with a
    warning; times must lie in [0,1].
    """
    if config is None:
        config = EncodingConfig()
    p = np.atleast_2d(np.asarray(p))
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    n = p.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=p.dtype), (n,))
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("timestamps must lie in [0, 1]")
    if np.any(np.abs(p) > 1.0):
        warnings.warn("positions outside the normalized scene box; clamping")
        p = np.clip(p, -1.0, 1.0)
    parts = []
    if config.include_input:
        parts.append(p)
    for b in range(config.spatial_bands):
        arg = (2.0 ** b) * np.pi * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if config.include_input:
        parts.append(t[:, None])
    for b in range(config.temporal_bands):
        arg = (2.0 ** b) * np.pi * t[:, None]
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1)


def encode_vjp(p, t, d_encoded, config=None):
    """Chain encoded-space gradients back to (p, t).

    Clamped coordinates get zero gradient (the clamp is flat there).
    """
    if config is None:
        config = EncodingConfig()
    p = np.atleast_2d(np.asarray(p))
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    n = p.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=p.dtype), (n,))
    pc = np.clip(p, -1.0, 1.0)
    d_p = np.zeros_like(pc)
    d_t = np.zeros_like(t)
    off = 0
    if config.include_input:
        d_p += d_encoded[:, 0:3]
        off = 3
    for b in range(config.spatial_bands):
        w = (2.0 ** b) * np.pi
        arg = w * pc
        d_p += d_encoded[:, off:off + 3] * w * np.cos(arg)
        d_p -= d_encoded[:, off + 3:off + 6] * w * np.sin(arg)
        off += 6
    if config.include_input:
        d_t = d_t + d_encoded[:, off]
        off += 1
    for b in range(config.temporal_bands):
        w = (2.0 ** b) * np.pi
        arg = w * t
        d_t = d_t + d_encoded[:, off] * w * np.cos(arg)
        d_t = d_t - d_encoded[:, off + 1] * w * np.sin(arg)
        off += 2
    d_p = np.where(np.abs(p) <= 1.0, d_p, 0.0)
    return d_p, d_t


class DeformationNetwork:
    """Rectifier MLP: encoded input -> 11 hidden layers of 128 -> 10 raw."""

    def __init__(self, weights, biases, config=None):
        self.weights = [np.asarray(w, dtype=np.float32) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float32) for b in biases]
        self.config = config if config is not None else EncodingConfig()
        if len(self.weights) != len(self.biases):
            raise ConfigurationError("weight/bias layer count mismatch")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigurationError("inconsistent layer shapes")
        for wa, wb in zip(self.weights[:-1], self.weights[1:]):
            if wa.shape[1] != wb.shape[0]:
                raise ConfigurationError("layer widths do not chain")

    @classmethod
    def create(cls, rng=None, config=None, hidden_width=HIDDEN_WIDTH,
               num_hidden=NUM_HIDDEN, out_width=RAW_WIDTH):
        """Small-uniform init; the output layer starts at exactly zero so the
        initial deformation is the identity."""
        if rng is None:
            rng = np.random.default_rng(0)
        if config is None:
            config = EncodingConfig()
        dims = [config.width] + [hidden_width] * num_hidden + [out_width]
        weights, biases = [], []
        for i in range(len(dims) - 1):
            if i == len(dims) - 2:
                w = np.zeros((dims[i], dims[i + 1]), np.float32)
            else:
                bound = 1.0 / np.sqrt(dims[i])
                w = rng.uniform(-bound, bound, (dims[i], dims[i + 1])).astype(np.float32)
            weights.append(w)
            biases.append(np.zeros(dims[i + 1], np.float32))
        return cls(weights, biases, config)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_layers(self):
        return len(self.weights)

    def flat_weights(self):
        return np.concatenate([w.ravel() for w in self.weights])

    def flat_biases(self):
        return np.concatenate(self.biases)

    def set_flat(self, flat_w, flat_b):
        ow = 0
        ob = 0
        for i, w in enumerate(self.weights):
            n = w.size
            self.weights[i] = np.asarray(flat_w[ow:ow + n], np.float32).reshape(w.shape)
            ow += n
            m = self.biases[i].size
            self.biases[i] = np.asarray(flat_b[ob:ob + m], np.float32)
            ob += m

    def split_flat(self, flat_w, flat_b):
        """Un-flatten gradient vectors into per-layer lists."""
        ws, bs = [], []
        ow = ob = 0
        for w, b in zip(self.weights, self.biases):
            ws.append(np.asarray(flat_w[ow:ow + w.size]).reshape(w.shape))
            ow += w.size
            bs.append(np.asarray(flat_b[ob:ob + b.size]))
            ob += b.size
        return ws, bs

    # ---- execution paths -------------------------------------------------

    def forward_reference(self, encoded):
        """Layer-by-layer evaluation in the dtype of `encoded`."""
        x = np.atleast_2d(encoded)
        dt = x.dtype if x.dtype == np.float64 else np.float32
        x = x.astype(dt, copy=False)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.astype(dt, copy=False) + b.astype(dt, copy=False)
            if i < len(self.weights) - 1:
                x = np.maximum(x, 0.0)
        return x

    def forward_fused(self, encoded):
        """Single-pass compiled evaluation; falls back to reference."""
        mod = backend.fused_mlp()
        if mod is None:
            return self.forward_reference(encoded)
        x = np.ascontiguousarray(np.atleast_2d(encoded), np.float32)
        return mod.forward(x, self.dims, self.flat_weights(), self.flat_biases())

    def forward(self, encoded):
        return self.forward_fused(encoded)

    def backward(self, encoded, d_output):
        """Reverse-mode gradients of forward_reference.

        Returns (d_weights, d_biases, d_encoded) with per-layer lists in
        the dtype of `encoded`.
        """
        x = np.atleast_2d(encoded)
        dt = x.dtype if x.dtype == np.float64 else np.float32
        x = x.astype(dt, copy=False)
        d_output = np.atleast_2d(d_output).astype(dt, copy=False)
        acts = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.astype(dt) + b.astype(dt)
            if i < len(self.weights) - 1:
                x = np.maximum(x, 0.0)
            acts.append(x)
        d_w = [None] * len(self.weights)
        d_b = [None] * len(self.biases)
        g = d_output
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            d_w[i] = acts[i].T @ g
            d_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].astype(dt).T
        return d_w, d_b, g

    def backward_fused(self, encoded, d_output, need_dx=True):
        """Compiled fused backward (f32); falls back to the reference path."""
        mod = backend.fused_mlp()
        if mod is None:
            d_w, d_b, g = self.backward(encoded, d_output)
            return (np.concatenate([w.ravel() for w in d_w]),
                    np.concatenate(d_b), g)
        x = np.ascontiguousarray(np.atleast_2d(encoded), np.float32)
        dy = np.ascontiguousarray(np.atleast_2d(d_output), np.float32)
        return mod.backward(x, self.dims, self.flat_weights(),
                            self.flat_biases(), dy, need_dx)


def decode_delta(raw):
    """Split the raw network output into a deformation delta.

    raw (N,10): translation, quaternion offset from identity, log scale.
    """
    raw = np.atleast_2d(raw)
    dx = raw[:, 0:3].copy()
    q = raw[:, 3:7].copy()
    q[:, 0] += 1.0
    dq = q_normalize(q)
    ds = np.exp(raw[:, 7:10])
    return DeformationDelta(d_position=dx, d_scale=ds, d_rotation=dq)


def decode_delta_vjp(raw, d_translation, d_rotation, d_scale):
    """Chain delta gradients back to the raw 10-vector."""
    raw = np.atleast_2d(raw)
    d_raw = np.zeros_like(raw)
    d_raw[:, 0:3] = d_translation
    q = raw[:, 3:7].copy()
    q[:, 0] += 1.0
    d_raw[:, 3:7] = q_normalize_vjp(q, d_rotation)
    d_raw[:, 7:10] = d_scale * np.exp(raw[:, 7:10])
    return d_raw


# ---- checkpoint IO -------------------------------------------------------

def save_sgsw(path, net):
    with open(path, "wb") as f:
        f.write(SGSW_MAGIC)
        f.write(struct.pack("<II", SGSW_VERSION, net.num_layers))
        for w, b in zip(net.weights, net.biases):
            f.write(struct.pack("<II", w.shape[0], w.shape[1]))
            f.write(np.ascontiguousarray(w, "<f4").tobytes())
            f.write(np.ascontiguousarray(b, "<f4").tobytes())


def load_sgsw(path, config=None):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SGSW_MAGIC:
            raise ValueError(f"not a network checkpoint: bad magic {magic!r}")
        version, nlayers = struct.unpack("<II", f.read(8))
        if version != SGSW_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        weights, biases = [], []
        for _ in range(nlayers):
            rows, cols = struct.unpack("<II", f.read(8))
            w = np.frombuffer(f.read(4 * rows * cols), "<f4").reshape(rows, cols)
            b = np.frombuffer(f.read(4 * cols), "<f4")
            weights.append(w.copy())
            biases.append(b.copy())
    return DeformationNetwork(weights, biases, config)


# ---- throughput benchmark ------------------------------------------------

def bench(net, batch_sizes, repeats=9, include_backward=True, seed=0):
    """Time both execution paths; returns rows of (path, batch, evals_per_sec).

    Each path runs sustained for at least `repeats` calls and 0.3 s of
    wall time after a warmup, and reports its best observed run; this
    filters out clock-ramp and scheduling transients.
    """
    import time

    rng = np.random.default_rng(seed)
    rows = []

    def measure(fn, batch):
        fn()
        fn()  # warmup
        best = np.inf
        deadline = time.perf_counter() + 0.3
        calls = 0
        while calls < repeats or time.perf_counter() < deadline:
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
            calls += 1
        return batch / best

    for batch in batch_sizes:
        x32 = rng.standard_normal((batch, net.dims[0])).astype(np.float32)
        dy = np.ones((batch, net.dims[-1]), np.float32)
        rows.append(("reference_forward", batch,
                     measure(lambda: net.forward_reference(x32), batch)))
        rows.append(("fused_forward", batch,
                     measure(lambda: net.forward_fused(x32), batch)))
        if include_backward:
            rows.append(("reference_forward_backward", batch,
                         measure(lambda: net.backward(x32, dy), batch)))
            rows.append(("fused_forward_backward", batch,
                         measure(lambda: net.backward_fused(x32, dy), batch)))
    return rows


def write_bench_csv(path, rows):
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "batch", "evals_per_sec"])
        for name, batch, eps in rows:
            writer.writerow([name, batch, f"{eps:.1f}"])
