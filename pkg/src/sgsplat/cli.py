"""Command-line interface: synth / init / train / render / eval / bench-mlp."""

import argparse
import os
import sys


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sgsplat",
        description="Deformable Gaussian-surfel reconstruction toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *names):
        if "data" in names:
            p.add_argument("--data", required=True, help="dataset directory")
        if "out" in names:
            p.add_argument("--out", required=True, help="output directory/file")
        if "seed" in names:
            p.add_argument("--seed", type=int, default=0)
        if "deterministic" in names:
            p.add_argument("--deterministic", action="store_true",
                           help="single-threaded BLAS, fixed seeding")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, "out", "seed", "deterministic")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--no-occluder", action="store_true")

    p = sub.add_parser("init", help="initialize a surfel cloud from a dataset")
    common(p, "data", "out", "seed", "deterministic")
    p.add_argument("--stride", type=int, default=2)

    p = sub.add_parser("train", help="run the optimization loop")
    common(p, "data", "out", "seed", "deterministic")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--iters", type=int, help="override iteration count")

    p = sub.add_parser("render", help="render a checkpoint at a timestamp")
    common(p, "data", "out", "deterministic")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", type=int, help="render at a frame's timestamp")
    p.add_argument("--t", type=float, help="render at an explicit timestamp")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, "data", "deterministic")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("bench-mlp", help="benchmark fused vs reference MLP")
    common(p, "out", "seed", "deterministic")
    p.add_argument("--batches", default="1024,4096,16384",
                   help="comma-separated batch sizes")
    return parser


def _apply_determinism(args):
    if getattr(args, "deterministic", False):
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = "1"


def _parse_config_file(path):
    from .errors import ConfigurationError

    mapping = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigurationError(
                        f"{path}:{lineno}: expected key=value"
                    )
                mapping[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return mapping


def cmd_synth(args):
    from .synth import SynthScene, generate

    scene = SynthScene(resolution=args.resolution, n_frames=args.frames,
                       texture_seed=args.seed, occluder=not args.no_occluder)
    generate(scene, args.out)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def cmd_init(args):
    from . import pimi
    from .datasets import load_dataset
    from .surfel import save_sgsc

    dataset = load_dataset(args.data)
    frames = [dataset.frames[i] for i in dataset.train_indices]
    cloud = pimi.initialize(frames, dataset.camera, stride=args.stride)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    save_sgsc(args.out, cloud)
    print(f"initialized {len(cloud)} surfels -> {args.out}")
    return 0


def cmd_train(args):
    from .datasets import load_dataset
    from .optim import TrainConfig, train

    mapping = _parse_config_file(args.config) if args.config else {}
    config = TrainConfig.from_mapping(mapping)
    if args.iters is not None:
        config.iterations = args.iters
    config.seed = args.seed
    config.deterministic = bool(args.deterministic)
    dataset = load_dataset(args.data)

    def progress(step, total, holdout):
        print(f"iter {step:6d}  loss {total:.5f}  holdout {holdout:.2f} dB")

    train(dataset, config, args.out, progress=progress)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_render(args):
    from .datasets import load_dataset, save_image, save_sgsd
    from .optim import deform_cloud, load_checkpoint
    from .raster import render

    dataset = load_dataset(args.data)
    cloud, net, normalizer = load_checkpoint(args.checkpoint)
    if args.frame is not None:
        t = dataset.frames[args.frame].timestamp
    elif args.t is not None:
        t = args.t
    else:
        t = 0.0
    deformed, _, _ = deform_cloud(cloud, net, normalizer, t)
    out = render(deformed, dataset.camera)
    os.makedirs(args.out, exist_ok=True)
    save_image(os.path.join(args.out, "color.png"), out.color)
    save_image(os.path.join(args.out, "normal.png"),
               (out.unit_normal() + 1.0) / 2.0)
    save_sgsd(os.path.join(args.out, "depth.sgsd"), out.depth)
    print(f"rendered t={t:g} -> {args.out}")
    return 0


def cmd_eval(args):
    import numpy as np

    from .datasets import load_dataset
    from .metrics import psnr, ssim
    from .optim import deform_cloud, load_checkpoint
    from .raster import render

    dataset = load_dataset(args.data)
    cloud, net, normalizer = load_checkpoint(args.checkpoint)
    print(f"{'frame':>6} {'psnr':>8} {'ssim':>8}")
    ps, ss = [], []
    for i in dataset.test_indices:
        frame = dataset.frames[i]
        deformed, _, _ = deform_cloud(cloud, net, normalizer, frame.timestamp)
        out = render(deformed, dataset.camera)
        p = psnr(frame.image, out.color, frame.tool_mask, cap=True)
        s = ssim(frame.image, out.color, frame.tool_mask)
        ps.append(p)
        ss.append(s)
        print(f"{i:>6} {p:8.3f} {s:8.4f}")
    if ps:
        print(f"{'mean':>6} {np.mean(ps):8.3f} {np.mean(ss):8.4f}")
    return 0


def cmd_bench_mlp(args):
    import numpy as np

    from .deform import DeformationNetwork, bench, write_bench_csv

    batches = [int(b) for b in args.batches.split(",")]
    net = DeformationNetwork.create(np.random.default_rng(args.seed))
    rows = bench(net, batches, seed=args.seed)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    write_bench_csv(args.out, rows)
    for path, batch, rate in rows:
        print(f"{path:28s} batch {batch:6d}  {rate:12.1f} evals/s")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "init": cmd_init,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "bench-mlp": cmd_bench_mlp,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    _apply_determinism(args)
    from .errors import SgsplatError

    try:
        return COMMANDS[args.command](args)
    except SgsplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
