"""``morphseg`` command line: phantoms, classical ACWE, training, inference, evaluation.

Failures exit nonzero with one line on stderr: ``error: <code>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_CODES = {
    "usage": 2,
    "not-found": 3,
    "format": 4,
    "invalid": 5,
    "degenerate": 6,
    "diverged": 7,
    "gradcheck": 8,
    "io": 9,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _triple(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return parts


def _volume_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError("not-found", f"data directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".nrrd", ".f32"))
    if not files:
        raise CliError("not-found", f"no .nrrd or .f32 volumes in {directory}")
    return files


def _load_images(directory, per_dataset: bool) -> list[np.ndarray]:
    from .volume import dataset_stats, load_volume, normalize

    raw = [load_volume(p).data for p in _volume_files(directory)]
    stats = dataset_stats(raw) if per_dataset else None
    return [normalize(v, stats).astype(np.float32) for v in raw]


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args):
    from .volume import PhantomSpec, Volume3D, make_phantom, save_volume

    spec = PhantomSpec.from_json(args.spec) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    image, mask = make_phantom(spec)
    save_volume(Volume3D(image), args.out)
    if args.gt:
        save_volume(Volume3D(mask), args.gt)
    print(f"phantom {spec.shape} with {spec.tube_count} tubes -> {args.out}")


def cmd_acwe(args):
    from .acwe import AcweParams, acwe_run, init_levelset
    from .volume import Volume3D, load_volume, normalize, save_volume

    params = AcweParams(alpha=args.alpha, beta=args.beta, mu=args.mu, iterations=args.iters)
    image = load_volume(args.inp).data
    if not args.no_normalize:
        image = normalize(image)
    mode = "mean-threshold" if args.init == "mean" else args.init
    mask, log = acwe_run(image, init_levelset(image, mode, args.period), params)
    save_volume(Volume3D(mask), args.out)
    if args.log:
        log.to_csv(args.log)
    last = log.rows[-1]
    print(f"acwe: {last[0]} iterations, {last[1]} voxels changed in the last one -> {args.out}")


def _train_config(args, crop_shape=None):
    from .train import TrainConfig

    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if crop_shape is not None and "crop_shape" not in data:
        data["crop_shape"] = list(crop_shape)
    if args.seed is not None:
        data["seed"] = args.seed
    return TrainConfig(**data)


def cmd_train(args):
    from .train import train

    cfg = _train_config(args)
    images = _load_images(args.data, args.per_dataset_norm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out / "train_log.jsonl"
    _, history = train(images, cfg, out_dir=out, log_path=log_path)
    final = history[-1] if history else {}
    print(f"trained {len(history)} steps on {len(images)} volumes; final total {final.get('total', float('nan')):.6f} -> {out}")


def cmd_finetune(args):
    from .train import finetune, load_network

    net, manifest = load_network(args.ckpt)
    cfg = _train_config(args, crop_shape=net.cfg.input_shape)
    images = _load_images(args.data, args.per_dataset_norm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out / "finetune_log.jsonl"
    _, history = finetune(net, images, cfg, budget_steps=args.budget_steps, budget_seconds=args.budget_seconds,
                          out_dir=out, log_path=log_path, start_step=manifest.get("step", 0))
    print(f"fine-tuned {len(history)} steps on {len(images)} volumes -> {out}")


def _write_overlays(image, prob, mask, directory):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for z in range(image.shape[0]):
        fig, ax = plt.subplots(figsize=(4, 4 * image.shape[1] / image.shape[2]), dpi=100)
        ax.imshow(image[z], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        if mask[z].any() and not mask[z].all():
            ax.contour(mask[z], levels=[0.5], colors="r", linewidths=0.8)
        ax.set_axis_off()
        ax.set_title(f"z={z}  mean S={prob[z].mean():.3f}", fontsize=8)
        fig.savefig(directory / f"slice_{z:04d}.png", bbox_inches="tight")
        plt.close(fig)


def cmd_segment(args):
    import torch

    from .train import InferenceConfig, load_network, sliding_window_segment, threshold
    from .volume import Volume3D, load_volume, normalize, save_volume

    cfg = InferenceConfig(window=args.window, stride=args.stride, threshold=args.threshold, batch_size=args.batch)
    net, _ = load_network(args.ckpt)
    image = normalize(load_volume(args.inp).data).astype(np.float32)
    with torch.no_grad():
        prob = sliding_window_segment(net, image, cfg)
    save_volume(Volume3D(prob), args.out)
    mask = threshold(prob, cfg.threshold)
    if args.mask:
        save_volume(Volume3D(mask), args.mask)
    if args.overlay_dir:
        _write_overlays(image, prob, mask, args.overlay_dir)
    print(f"segmented {image.shape}: {int(mask.sum())} foreground voxels -> {args.out}")


def cmd_eval(args):
    from .metrics import evaluate
    from .volume import load_volume

    pred = load_volume(args.pred).data
    gt = load_volume(args.gt).data
    if pred.shape != gt.shape:
        raise CliError("invalid", f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    report = evaluate(pred, gt, threshold=args.threshold)
    if args.report:
        report.to_json(args.report)
    if args.csv:
        report.to_csv(args.csv)
    print(" ".join(f"{k}={v:.4f}" for k, v in zip(("AP", "F1", "Sens", "Spec", "JI", "DICE", "mIoU"), report.row())))


def cmd_gradcheck(args):
    import torch

    from .gradcheck import SUITES

    torch.set_default_dtype(torch.float64)
    try:
        results = SUITES[args.scope](seed=args.seed)
    finally:
        torch.set_default_dtype(torch.float32)
    failed = []
    for name, (err, tol) in results.items():
        status = "ok" if err < tol else "FAIL"
        print(f"{name:28s} max_rel_err={err:.3e} tol={tol:.0e} {status}")
        if err >= tol:
            failed.append(name)
    if failed:
        raise CliError("gradcheck", f"tolerance exceeded for {', '.join(failed)}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="morphseg", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="worker thread cap (default: $MORPHSEG_THREADS)")
    p.add_argument("--deterministic", action="store_true", help="force fixed-order reductions")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="write a synthetic tube phantom and its ground truth")
    s.add_argument("--spec", help="PhantomSpec JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--gt")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("acwe", help="classical morphological ACWE")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=2.0)
    s.add_argument("--mu", type=int, default=1)
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--init", choices=("mean", "mean-threshold", "checkerboard"), default="mean")
    s.add_argument("--period", type=int, default=4, help="checkerboard block size")
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--log", help="convergence CSV")
    s.set_defaults(func=cmd_acwe)

    for name, helptext in (("train", "unsupervised training"), ("finetune", "continue training on test images")):
        s = sub.add_parser(name, help=helptext)
        if name == "finetune":
            s.add_argument("--ckpt", required=True)
            budget = s.add_mutually_exclusive_group(required=True)
            budget.add_argument("--budget-steps", type=int)
            budget.add_argument("--budget-seconds", type=float)
        s.add_argument("--data", required=True, help="directory of .nrrd / .f32 images")
        s.add_argument("--config", help="TrainConfig JSON")
        s.add_argument("--out", required=True)
        s.add_argument("--log")
        s.add_argument("--seed", type=int)
        s.add_argument("--per-dataset-norm", action="store_true")
        s.set_defaults(func=cmd_train if name == "train" else cmd_finetune)

    s = sub.add_parser("segment", help="sliding-window inference")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True, help="probability volume")
    s.add_argument("--mask")
    s.add_argument("--window", type=_triple, default=(32, 128, 128))
    s.add_argument("--stride", type=_triple, default=(8, 16, 16))
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--overlay-dir")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("eval", help="metrics of a prediction against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report")
    s.add_argument("--csv")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--scope", choices=("op", "layer", "end2end"), default="op")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _configure_threads(threads, deterministic):
    if threads is None and os.environ.get("MORPHSEG_THREADS"):
        try:
            threads = int(os.environ["MORPHSEG_THREADS"])
        except ValueError:
            raise CliError("usage", f"MORPHSEG_THREADS must be an integer, got {os.environ['MORPHSEG_THREADS']!r}")
    if threads is not None and threads < 1:
        raise CliError("usage", "--threads must be >= 1")
    import torch

    if threads is not None:
        torch.set_num_threads(threads)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _classify(exc: BaseException) -> str:
    from .acwe import DegenerateRegionError
    from .losses import CollapsedMaskError
    from .train import TrainingDivergedError
    from .volume import VolumeFormatError

    if isinstance(exc, VolumeFormatError):
        return "format"
    if isinstance(exc, FileNotFoundError):
        return "not-found"
    if isinstance(exc, (DegenerateRegionError, CollapsedMaskError)):
        return "degenerate"
    if isinstance(exc, TrainingDivergedError):
        return "diverged"
    if isinstance(exc, (ValueError, KeyError, TypeError, json.JSONDecodeError)):
        return "invalid"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        _configure_threads(args.threads, args.deterministic)
        args.func(args)
        return 0
    except CliError as exc:
        code = exc.code
        message = str(exc)
    except Exception as exc:  # every failure becomes one parsable line
        code = _classify(exc)
        message = f"{type(exc).__name__}: {exc}"
    print(f"error: {code}: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES.get(code, 1)


if __name__ == "__main__":
    sys.exit(main())
