"""``mvprior`` command line: synth, analyze, train, eval, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
``MVPRIOR_THREADS`` caps the worker threads used for per-sequence work.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataprep, metrics, mgd, store
from . import train as tr
from .errors import (DataFormatError, DimensionMismatchError, EmptyObjectError, GenerationError,
                     InsufficientDataError, InvalidParameterError, MvpriorError, NotPSDError, NumericError)
from .geometry import FrameDims
from .mgd import GaussianND

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(MvpriorError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def worker_count() -> int:
    raw = os.environ.get("MVPRIOR_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MVPRIOR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MVPRIOR_THREADS must be a positive integer, got {raw!r}")
    return n


def _map(fn, items):
    """Ordered map over a thread pool; results never depend on the worker count."""
    items = list(items)
    n = min(worker_count(), max(len(items), 1))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _dims(text: str) -> FrameDims:
    try:
        return FrameDims.parse(text)
    except (ValueError, InvalidParameterError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _load_prior(path) -> GaussianND:
    if path is None:
        return mgd.published_prior()
    p = Path(path)
    if not p.is_file():
        raise DataFormatError(f"{p}: prior file not found")
    try:
        g = GaussianND.load(p)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{p}: malformed prior ({exc})") from exc
    if g.k != 5:
        raise DataFormatError(f"{p}: prior must be 5-dimensional, got k={g.k}")
    return g


def _out_dir(path) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"{p}: output path exists and is not a directory")
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise DataFormatError(f"{p}: output directory is not writable")
    return p


def _dataset(path) -> tuple[Path, store.Manifest]:
    root = Path(path)
    if not root.is_dir():
        raise DataFormatError(f"{root}: dataset directory not found")
    return root, store.read_manifest(root)


# ---------------------------------------------------------------- synth

# Only rectangles keep the mask's minimum-area box on the motion law; other
# outlines add box jitter, so analyze on "mixed" data overstates the spread.
SHAPE_SETS = {"mixed": dataprep.SHAPE_KINDS, "rect": ("rect",)}


def cmd_synth(args) -> int:
    prior = _load_prior(args.prior)
    if args.sequences < 0 or args.len < 1 or args.val < 0:
        raise UsageError("--sequences and --val must be >= 0 and --len >= 1")
    out = _out_dir(args.out)

    def make(i):
        rng = dataprep.sequence_rng(args.seed, i)
        try:
            shape = dataprep.random_shape(rng, args.dims, SHAPE_SETS[args.shapes])
            s = dataprep.synthesize_sequence(prior, shape, args.len, args.dims, rng)
        except GenerationError:
            return i, None, "generation"
        verdict = dataprep.filter_sequence(s)
        return i, (s if verdict else None), verdict.reason

    results = _map(make, range(args.sequences))
    entries, reasons = [], Counter()
    n_train = args.sequences - args.val
    for i, s, reason in results:
        reasons[reason] += 1
        if s is None:
            continue
        sid = f"{i:05d}"
        rel = store.write_sequence(out, sid, s)
        entries.append(store.SequenceEntry(sid, rel, len(s), "train" if i < n_train else "val"))
    meta = {"seed": args.seed, "length": args.len, "shapes": args.shapes, "prior": prior.to_dict(),
            "requested": args.sequences, "rejected": {k: v for k, v in sorted(reasons.items()) if k != "ok"}}
    store.write_manifest(out, store.Manifest(args.dims, entries, meta))
    rejected = args.sequences - len(entries)
    detail = ", ".join(f"{k} {v}" for k, v in sorted(reasons.items()) if k != "ok") or "none"
    print(f"synth: {args.sequences} requested, {len(entries)} accepted, {rejected} rejected ({detail}) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    root, manifest = _dataset(args.data)
    if not manifest.sequences:
        raise InsufficientDataError(f"{root}: dataset has no sequences")
    seqs = _map(lambda e: store.read_sequence(root, e, manifest.dims, images=False), manifest.sequences)
    g = dataprep.analyze_dataset(seqs)
    text = json.dumps(g.to_dict(), indent=2)
    print(text)
    out = Path(args.out) if args.out else root / "prior.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    g.save(out)
    return EXIT_OK


# ---------------------------------------------------------------- train


def load_patches(root, entries, dims, P) -> tr.PatchSet | None:
    def crop(e):
        return dataprep.sequence_patches(store.read_sequence(root, e, dims), P)

    patches = [p for ps in _map(crop, entries) for p in ps]
    return tr.PatchSet.from_patches(patches) if patches else None


def cmd_train(args) -> int:
    root, manifest = _dataset(args.data)
    out = _out_dir(args.out)
    prior = _load_prior(args.prior)
    if args.resume:
        if not Path(args.resume).is_file():
            raise DataFormatError(f"{args.resume}: checkpoint not found")
        state, cfg, stored = tr.load_run(args.resume)
        prior = stored if stored is not None and args.prior is None else prior
        cfg.steps = args.steps if args.steps is not None else cfg.steps
    else:
        cfg = tr.TrainConfig(beta=args.beta, batch=args.batch, lr_min=args.lr_min, lr_max=args.lr_max,
                             cycle=args.cycle, steps=args.steps if args.steps is not None else 2000,
                             val_interval=args.val_interval, seed=args.seed, variant=args.variant,
                             patch=args.patch)
        state = None
    train_set = load_patches(root, manifest.split("train"), manifest.dims, cfg.patch)
    if train_set is None:
        raise InsufficientDataError(f"{root}: no training sequences")
    val_set = load_patches(root, manifest.split("val"), manifest.dims, cfg.patch)
    log = print if args.verbose else None
    report = tr.TrainReport()
    if state is None:
        state = tr.init_state(cfg, train_set.images.shape[-1])
    elif state.params.arch.channels != train_set.images.shape[-1]:
        raise DimensionMismatchError("checkpoint channel count does not match the dataset")
    state, report = tr.fit(cfg, train_set, val_set, prior, state, report, log=log)
    ckpt = out / "checkpoint.bin"
    tr.save_state(ckpt, state, cfg, prior)
    report.write(out / "train.csv", out / "val.csv")
    last = report.vals[-1] if report.vals else None
    summary = f"train: {cfg.variant} seed {cfg.seed}, {state.step} steps -> {ckpt}"
    if last is not None:
        summary += f"; val d_mah {last.d_mah:.4g} j {last.j:.3f} f {last.f:.3f}"
    print(summary)
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataFormatError(f"{ckpt}: checkpoint not found")
    root, manifest = _dataset(args.data)
    out = _out_dir(args.out)
    state, cfg, stored = tr.load_run(ckpt)
    arch = state.params.arch
    if args.patch is not None and args.patch != arch.patch:
        raise DimensionMismatchError(f"--patch {args.patch} does not match checkpoint patch {arch.patch}")
    if args.variant is not None and args.variant != arch.variant:
        raise DimensionMismatchError(f"--variant {args.variant} does not match checkpoint variant {arch.variant}")
    prior = _load_prior(args.prior) if args.prior or stored is None else stored
    batch = args.batch if args.batch is not None else cfg.batch
    entries = manifest.split(args.split) if args.split != "all" else manifest.sequences

    def run(item):
        idx, e = item
        s = store.read_sequence(root, e, manifest.dims)
        rows, masks = [], []
        for k, (img, m) in enumerate(zip(s.images, s.frames)):
            patch = dataprep.crop_patch(img, m, arch.patch, source=k)
            if patch.image.shape[-1] != arch.channels:
                raise DimensionMismatchError(f"{e.path}: {patch.image.shape[-1]} channels, checkpoint has {arch.channels}")
            gt = patch.gt_mask
            if args.inject_gt:
                prob, mask = gt.astype(float), gt
            else:
                res = tr.tiled_inference(state.params, patch.image, gt, prior, batch,
                                         np.random.default_rng([args.seed, idx, k]))
                prob, mask = res.prob, res.mask
            rows.append(metrics.evaluate_pair(e.id, k, prob, mask, gt))
            masks.append(mask)
        return e, rows, masks

    results = _map(run, enumerate(entries))
    rows = [r for _, rs, _ in results for r in rs]
    metrics.write_rows(out / "metrics.csv", rows)
    if args.dump_masks:
        for e, _, masks in results:
            d = out / "masks" / e.path
            d.mkdir(parents=True, exist_ok=True)
            for k, m in enumerate(masks):
                store.write_pgm(d / f"frame_{k:03d}.pgm", m)
    if rows:
        j = np.mean([r.j for r in rows])
        f = np.mean([r.f for r in rows])
        print(f"eval: {len(rows)} frames from {len(entries)} sequences, mean j {j:.3f} f {f:.3f} -> {out}")
    else:
        print(f"eval: no frames in split {args.split!r} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- report


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    train_csv, val_csv = run / "train.csv", run / "val.csv"
    for p in (train_csv, val_csv):
        if not p.is_file():
            raise DataFormatError(f"{p}: report input not found")
    out = _out_dir(args.out or run)
    plt.rcParams["svg.hashsalt"] = "mvprior"
    svg_meta = {"Date": None}
    steps, vals = tr.read_csv(train_csv), tr.read_csv(val_csv)
    written = []

    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    x = [r["step"] for r in steps]
    for ax, key, title in zip(axes.flat, ("l_total", "l_cons", "l_kl", "lr"),
                              ("total loss", "construction loss", "KL to prior", "learning rate")):
        ax.plot(x, [r[key] for r in steps], lw=0.8)
        ax.set_title(title)
    for ax in axes[1]:
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(out / "losses.svg", metadata=svg_meta)
    plt.close(fig)
    written.append("losses.svg")

    if vals:
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
        vx = [r["step"] for r in vals]
        axes[0].semilogy(vx, [max(r["d_mah"], 1e-12) for r in vals], marker="o", ms=3)
        axes[0].set_title("Mahalanobis distance to prior")
        axes[1].plot(vx, [r["nll"] for r in vals], marker="o", ms=3, label="nll")
        axes[1].plot(vx, [r["mse"] for r in vals], marker="o", ms=3, label="mse")
        axes[1].legend()
        axes[1].set_title("pixel scores")
        axes[2].plot(vx, [r["j"] for r in vals], marker="o", ms=3, label="J")
        axes[2].plot(vx, [r["f"] for r in vals], marker="o", ms=3, label="F")
        axes[2].legend()
        axes[2].set_title("region / boundary")
        for ax in axes:
            ax.set_xlabel("step")
        fig.tight_layout()
        fig.savefig(out / "validation.svg", metadata=svg_meta)
        plt.close(fig)
        written.append("validation.svg")

    if args.metrics:
        mpath = Path(args.metrics)
        if not mpath.is_file():
            raise DataFormatError(f"{mpath}: metrics CSV not found")
        import csv

        with open(mpath, newline="") as fh:
            rows = list(csv.DictReader(fh))
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
        for ax, key in zip(axes, ("j", "f")):
            ax.hist([float(r[key]) for r in rows], bins=20, range=(0, 1))
            ax.set_title(f"per-frame {key.upper()}")
        fig.tight_layout()
        fig.savefig(out / "metrics.svg", metadata=svg_meta)
        plt.close(fig)
        written.append("metrics.svg")
    print(f"report: wrote {', '.join(written)} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _train_flags(p, *, defaults: bool):
    d = tr.TrainConfig()
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--batch", type=int, default=d.batch if defaults else None)
    p.add_argument("--lr-min", type=float, default=d.lr_min)
    p.add_argument("--lr-max", type=float, default=d.lr_max)
    p.add_argument("--cycle", type=int, default=d.cycle)
    p.add_argument("--steps", type=int, default=None, help="total training steps (default 2000)")
    p.add_argument("--val-interval", type=int, default=d.val_interval)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvprior", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic mask-sequence dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=600)
    p.add_argument("--len", type=int, default=12)
    p.add_argument("--val", type=int, default=100, help="the last N sequence indices form the val split")
    p.add_argument("--dims", type=_dims, default=FrameDims(128, 128), help="frame size WxH")
    p.add_argument("--prior", help="motion prior JSON (default: built-in published prior)")
    p.add_argument("--shapes", choices=sorted(SHAPE_SETS), default="mixed",
                   help="object outlines; use rect when the refitted prior should match the generating one")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="fit the motion prior of a dataset")
    p.add_argument("data")
    p.add_argument("--out", help="prior JSON path (default <data>/prior.json)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train a network on a dataset")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prior", help="prior JSON (default: built-in published prior)")
    p.add_argument("--variant", choices=("plain", "unet"), default="plain")
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--verbose", action="store_true")
    _train_flags(p, defaults=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="tiled stochastic inference with best-of-batch selection")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prior", help="prior JSON (default: the one stored in the checkpoint)")
    p.add_argument("--batch", type=int, default=None, help="tile count (default: training batch size)")
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--variant", choices=("plain", "unet"), default=None)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--dump-masks", action="store_true")
    p.add_argument("--inject-gt", action="store_true", help="score the ground truth as the prediction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render training and metric CSVs to SVG")
    p.add_argument("run", help="directory with train.csv and val.csv")
    p.add_argument("--out", help="output directory (default: the run directory)")
    p.add_argument("--metrics", help="metrics CSV from eval")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        worker_count()
        return args.func(args)
    except (UsageError, InvalidParameterError) as exc:
        print(f"mvprior {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, NotPSDError, FloatingPointError) as exc:
        print(f"mvprior {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, InsufficientDataError, EmptyObjectError, DimensionMismatchError,
            GenerationError, OSError) as exc:
        print(f"mvprior {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
