"""Command-line surface.

Subcommands: ``config``, ``params``, ``shapes``, ``infer``, ``train``,
``eval``, ``bench``, ``anchors``. Exit codes: 0 success, 1 usage error,
2 data/format error. Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import cli_io
from . import detect_head as dh
from . import evaluator as ev
from . import netgraph as ng
from . import trainer
from .errors import MffdError

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse, but usage errors exit 1 (2 is reserved for data errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_net(args) -> ng.NetworkSpec:
    if getattr(args, "config", None):
        return cli_io.read_network(args.config)
    return ng.build_variant(
        args.variant,
        classes=args.classes,
        boxes=args.boxes,
        width_div=getattr(args, "width_div", 1),
    )


def _net_options(p, with_config: bool):
    if with_config:
        p.add_argument("--config", help="network config file (overrides --variant)")
    p.add_argument("--variant", default="ref", choices=ng.VARIANT_NAMES)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--boxes", type=int, default=5)
    p.add_argument("--width-div", type=int, default=1, dest="width_div", help="divide every backbone width by this")


def _class_names(args, num_classes: int) -> tuple[str, ...]:
    if getattr(args, "names", None):
        names = tuple(s.strip() for s in args.names.split(",") if s.strip())
        if len(names) != num_classes:
            raise ValueError(f"--names lists {len(names)} classes, network predicts {num_classes}")
        return names
    if num_classes == len(cli_io.KITTI_CLASSES):
        return cli_io.KITTI_CLASSES
    return tuple(f"class{i}" for i in range(num_classes))


# -- table commands --------------------------------------------------------------


def cmd_config(args) -> int:
    spec = ng.build_variant(args.variant, classes=args.classes, boxes=args.boxes, width_div=args.width_div)
    text = cli_io.serialize_network(spec)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_params(args) -> int:
    spec = _load_net(args)
    report = ng.count_params(spec)
    rows = list(report.rows) + [("Total", report.total)]
    width = max(len(name) for name, _ in rows)
    print(f"{'Module':<{width}} {'Params':>12}")
    for name, count in rows:
        print(f"{name:<{width}} {count:>12,}")
    return 0


def cmd_shapes(args) -> int:
    spec = _load_net(args)
    shapes = ng.infer_shapes(spec)
    rows = [("Input", spec.input_shape)]
    rows += [(m.name, shapes[m.report]) for m in spec.modules]
    width = max(len(name) for name, _ in rows)
    print(f"{'Layer':<{width}} Output size")
    for name, (c, h, w) in rows:
        print(f"{name:<{width}} {h} x {w} x {c}")
    return 0


# -- inference --------------------------------------------------------------------


def cmd_infer(args) -> int:
    spec = cli_io.read_network(args.config)
    store = cli_io.load_weights(args.weights, spec)
    image = cli_io.load_ppm(args.image)
    orig_h, orig_w = image.shape[1], image.shape[2]
    _, net_h, net_w = spec.input_shape
    x = cli_io.resize_bilinear(image, net_h, net_w).astype(np.float32)
    acts = ng.forward(spec, store, x)
    anchors = dh.AnchorSet(spec.anchors)

    dets = []
    num_classes = spec.detect_nodes()[0].classes
    for node in spec.detect_nodes():
        dets += dh.decode(acts[node.id], anchors, img_w=orig_w, img_h=orig_h, conf_thresh=args.conf)
    dets = dh.nms(dets, iou_thresh=args.nms)
    names = _class_names(args, num_classes)

    if args.heatmap:
        heat = np.zeros((orig_h, orig_w), dtype=np.float64)
        for node in spec.detect_nodes():
            heat = np.maximum(heat, dh.objectness_heatmap(acts[node.id], anchors, out_hw=(orig_h, orig_w))[1])
        cli_io.save_pgm(args.heatmap, heat)

    if args.out:
        cli_io.write_detections(args.out, dets, names)
        print(f"{len(dets)} detections -> {args.out}", file=sys.stderr)
    else:
        for d in dets:
            x1, y1, x2, y2 = d.bbox
            print(f"{names[d.class_id]} {d.score:.6f} {x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f}")
    return 0


# -- training ---------------------------------------------------------------------


def _image_stems(directory) -> list[str]:
    stems = [f[:-4] for f in os.listdir(directory) if f.endswith(".ppm")]
    return sorted(stems)


def load_training_dir(directory, spec: ng.NetworkSpec) -> list[trainer.Sample]:
    """Pair ``stem.ppm`` images with ``stem.txt`` KITTI-style labels.

    Images are stretched to the network input size; since box coordinates are
    normalized by the original frame, the stretch leaves targets unchanged.
    Boxes with no area after clipping to the frame are dropped.
    """
    _, net_h, net_w = spec.input_shape
    num_classes = spec.detect_nodes()[0].classes
    samples = []
    for stem in _image_stems(directory):
        image = cli_io.load_ppm(os.path.join(directory, f"{stem}.ppm"))
        h, w = image.shape[1], image.shape[2]
        if (h, w) != (net_h, net_w):
            image = cli_io.resize_bilinear(image, net_h, net_w)
        label_path = os.path.join(directory, f"{stem}.txt")
        targets = []
        if os.path.exists(label_path):
            gts, _ = cli_io.parse_kitti_labels(label_path)
            for g in gts:
                cls = cli_io.KITTI_CLASSES.index(g.class_id)
                if cls >= num_classes:
                    continue
                x1, y1, x2, y2 = g.bbox
                x1, x2 = max(0.0, min(x1, w)), max(0.0, min(x2, w))
                y1, y2 = max(0.0, min(y1, h)), max(0.0, min(y2, h))
                if x2 <= x1 or y2 <= y1:
                    continue
                cx = min((x1 + x2) / 2 / w, np.nextafter(1.0, 0.0))
                cy = min((y1 + y2) / 2 / h, np.nextafter(1.0, 0.0))
                targets.append((cls, cx, cy, (x2 - x1) / w, (y2 - y1) / h))
        samples.append(trainer.Sample(image.astype(np.float32), tuple(targets)))
    if not samples:
        raise ValueError(f"no .ppm images found in {directory}")
    return samples


def _scaled_drops(epochs: int) -> tuple[int, ...]:
    base = trainer.SGDConfig()
    return tuple(max(1, round(d * epochs / base.total_epochs)) for d in base.lr_drops)


def cmd_train(args) -> int:
    spec = cli_io.read_network(args.config)
    data = load_training_dir(args.data, spec)
    drops = tuple(int(v) for v in args.lr_drops.split(",")) if args.lr_drops else _scaled_drops(args.epochs)
    cfg = dataclasses.replace(
        trainer.SGDConfig(),
        total_epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        lr_drops=drops,
    )
    start = cli_io.load_weights(args.resume, spec) if args.resume else None
    result = trainer.train(
        spec,
        data,
        cfg=cfg,
        seed=args.seed,
        do_augment=not args.no_augment,
        weights=start,
        checkpoint_dir=args.checkpoint_dir,
    )
    cli_io.save_weights(args.out, spec, result.weights)
    with open(args.log, "w", encoding="utf-8") as f:
        f.write("\n".join(result.log) + ("\n" if result.log else ""))
    print(f"{result.iterations} iterations, final loss {result.final_loss:.6f}", file=sys.stderr)
    print(f"weights -> {args.out}, loss log -> {args.log}", file=sys.stderr)
    return 0


# -- evaluation -------------------------------------------------------------------


def cmd_eval(args) -> int:
    label_files = sorted(f for f in os.listdir(args.labels) if f.endswith(".txt"))
    if not label_files:
        raise ValueError(f"no .txt label files found in {args.labels}")
    gts_by_image = {}
    dets_by_image = {}
    for fname in label_files:
        stem = fname[:-4]
        gts, dont_care = cli_io.parse_kitti_labels(os.path.join(args.labels, fname))
        gts_by_image[stem] = gts + [ev.GtBox(ev.DONT_CARE, b) for b in dont_care]
        det_path = os.path.join(args.dets, fname)
        dets_by_image[stem] = cli_io.read_detections(det_path) if os.path.exists(det_path) else []
    cfg = ev.voc_config() if args.voc else ev.kitti_config(difficulty=args.difficulty)
    result = ev.evaluate(dets_by_image, gts_by_image, cfg)
    sys.stdout.write(ev.format_ap_table(result))
    if args.pr_dir:
        os.makedirs(args.pr_dir, exist_ok=True)
        for r in result.per_class:
            with open(os.path.join(args.pr_dir, f"{r.class_id}.csv"), "w", encoding="utf-8") as f:
                f.write(ev.pr_csv(r))
    return 0


# -- benchmarking -----------------------------------------------------------------


def cmd_bench(args) -> int:
    spec = _load_net(args)
    if args.weights:
        store = cli_io.load_weights(args.weights, spec)
    else:
        store = trainer.init_weights(spec, seed=args.seed)
    if args.iters < 1:
        raise ValueError(f"--iters must be >= 1, got {args.iters}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(args.seed)))
    x = rng.standard_normal(spec.input_shape).astype(np.float32)
    ng.forward(spec, store, x)  # warmup: first call pays allocator setup
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        ng.forward(spec, store, x)
        times.append((time.perf_counter() - t0) * 1000.0)
    mean_ms = sum(times) / len(times)
    print(f"iters: {args.iters}")
    print(f"mean_ms: {mean_ms:.3f}")
    print(f"min_ms: {min(times):.3f}")
    print(f"fps: {1000.0 / mean_ms:.2f}")
    return 0


# -- anchor fitting ---------------------------------------------------------------


def cmd_anchors(args) -> int:
    image_dir = args.images or args.labels
    fallback = None
    if args.image_size:
        try:
            w, h = (int(v) for v in args.image_size.lower().split("x"))
        except ValueError:
            raise ValueError(f"--image-size must look like 1242x375, got {args.image_size!r}") from None
        fallback = (h, w)
    pairs = []
    for fname in sorted(os.listdir(args.labels)):
        if not fname.endswith(".txt"):
            continue
        gts, _ = cli_io.parse_kitti_labels(os.path.join(args.labels, fname))
        if not gts:
            continue
        ppm = os.path.join(image_dir, f"{fname[:-4]}.ppm")
        if os.path.exists(ppm):
            h, w = cli_io.ppm_size(ppm)
        elif fallback:
            h, w = fallback
        else:
            raise ValueError(f"no image for {fname} and no --image-size given")
        for g in gts:
            x1, y1, x2, y2 = g.bbox
            if x2 > x1 and y2 > y1:
                pairs.append(((x2 - x1) / w, (y2 - y1) / h))
    fitted = cli_io.fit_anchors(pairs, k=args.k, seed=args.seed)
    print("anchors " + " ".join(f"{w:g},{h:g}" for w, h in fitted.priors))
    return 0


# -- wiring -----------------------------------------------------------------------


def _build_parser() -> _Parser:
    p = _Parser(prog="mffd", description="Small multi-scale box detector: build, train, evaluate.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    sp = sub.add_parser("config", help="print a built-in variant as config text")
    _net_options(sp, with_config=False)
    sp.add_argument("--out", help="write to a file instead of stdout")
    sp.set_defaults(func=cmd_config)

    sp = sub.add_parser("params", help="per-module convolution weight counts")
    _net_options(sp, with_config=True)
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("shapes", help="per-module output shapes")
    _net_options(sp, with_config=True)
    sp.set_defaults(func=cmd_shapes)

    sp = sub.add_parser("infer", help="run detection on one image")
    sp.add_argument("--config", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--image", required=True, help="binary PPM (P6)")
    sp.add_argument("--conf", type=float, default=0.25, help="objectness-score floor")
    sp.add_argument("--nms", type=float, default=0.45, help="NMS IoU threshold")
    sp.add_argument("--out", help="write detections here instead of stdout")
    sp.add_argument("--heatmap", help="write an objectness heat map (PGM) here")
    sp.add_argument("--names", help="comma-separated class names")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("train", help="SGD training over a directory of ppm+txt pairs")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True, help="directory of stem.ppm / stem.txt pairs")
    sp.add_argument("--epochs", type=int, default=trainer.SGDConfig().total_epochs)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resume", help="weights file to continue from")
    sp.add_argument("--out", default="model.weights", help="output weights file")
    sp.add_argument("--log", default="train.log", help="output loss log")
    sp.add_argument("--lr", type=float, default=trainer.SGDConfig().lr)
    sp.add_argument("--batch-size", type=int, default=trainer.SGDConfig().batch_size, dest="batch_size")
    sp.add_argument("--lr-drops", dest="lr_drops", help="comma-separated drop epochs (default: scaled with --epochs)")
    sp.add_argument("--no-augment", action="store_true", dest="no_augment")
    sp.add_argument("--checkpoint-dir", dest="checkpoint_dir", help="write per-epoch weight snapshots here")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="AP table from detection and label directories")
    sp.add_argument("--dets", required=True, help="directory of detection files")
    sp.add_argument("--labels", required=True, help="directory of KITTI-style label files")
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--kitti", action="store_true", help="KITTI classes and per-class IoU thresholds (default)")
    mode.add_argument("--voc", action="store_true", help="uniform IoU 0.5 over classes present in the labels")
    sp.add_argument("--difficulty", default="moderate", choices=("easy", "moderate", "hard", "all"))
    sp.add_argument("--pr-dir", dest="pr_dir", help="also write per-class recall,precision CSVs here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="forward-pass timing")
    sp.add_argument("--config", help="network config file (default: --variant)")
    sp.add_argument("--variant", default="ref", choices=ng.VARIANT_NAMES)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--boxes", type=int, default=5)
    sp.add_argument("--width-div", type=int, default=1, dest="width_div")
    sp.add_argument("--weights", help="weights file (default: seeded random init)")
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("anchors", help="fit anchor priors to a label directory")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--images", help="directory of matching .ppm files (default: --labels)")
    sp.add_argument("--image-size", dest="image_size", help="WxH fallback when no image exists, e.g. 1242x375")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_anchors)

    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (MffdError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
