"""``houghlane`` command line: labels, evaluation, prediction, toy training, DHT benchmark."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets as D
from .geometry import HoughSpec, LaneSet, render_hough_label
from .metrics import category_report, culane_f1, format_report, merge, tusimple_accuracy
from .serialization import append_jsonl, overlay, write_hmap, write_png

PROFILES = {  # annotation image size, network input, Hough map (Theta, R)
    "tusimple": (D.TUSIMPLE_SIZE, (640, 360), (240, 240)),
    "culane": (D.CULANE_SIZE, (640, 360), (360, 216)),
}


def _configure_threads(deterministic: bool) -> None:
    import torch

    if deterministic:
        torch.set_num_threads(1)
    elif os.environ.get("HOUGHLANE_THREADS"):
        torch.set_num_threads(max(1, int(os.environ["HOUGHLANE_THREADS"])))


# -- build-labels ----------------------------------------------------------


def _annotations(fmt: str, paths: list[str]):
    """(name, LaneSet) pairs from TuSimple JSON-lines files or CULane .lines.txt files/dirs."""
    if fmt == "tusimple":
        for p in paths:
            for rec in D.read_tusimple(p):
                yield rec.raw_file, rec.to_laneset()
        return
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("*.lines.txt")) if p.is_dir() else [p]
        for f in files:
            yield str(f.relative_to(p) if p.is_dir() else f.name), D.read_culane(f).to_laneset()


def _safe_name(name: str) -> str:
    stem = name[: -len(".lines.txt")] if name.endswith(".lines.txt") else os.path.splitext(name)[0]
    return stem.strip("/").replace("/", "__")


def cmd_build_labels(args) -> int:
    src_size, net_size, map_size = PROFILES[args.format]
    src_size = tuple(args.image_size or src_size)
    net_size = tuple(args.input_size or net_size)
    theta, r = args.theta or map_size[0], args.r or map_size[1]
    spec = HoughSpec.for_grid(net_size[0], net_size[1], theta, r)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sx, sy = net_size[0] / src_size[0], net_size[1] / src_size[1]
    n = 0
    for name, lanes in _annotations(args.format, args.annotations):
        label = render_hough_label(lanes.scaled(sx, sy), spec, args.splat_radius)
        stem = out / _safe_name(name)
        write_hmap(stem.with_suffix(".hmap"), label.map)
        if not args.no_png:
            write_png(stem.with_suffix(".png"), label.map)
        append_jsonl(out / "peaks.jsonl", {"name": name, "peaks": [[p.theta_idx, p.r_idx] for p in label.peaks]})
        n += 1
    print(json.dumps({"labels": n, "theta": theta, "r": r, "out": str(out)}))
    return 0


# -- eval --------------------------------------------------------------------


def _category_lists(list_dir: str) -> dict[str, str]:
    """image stem -> category tag, from CULane-style ``<tag>.txt`` list files."""
    out = {}
    for f in sorted(Path(list_dir).glob("*.txt")):
        for line in f.read_text().splitlines():
            if line.strip():
                out[_safe_name(line.strip().split()[0])] = f.stem
    return out


def cmd_eval(args) -> int:
    if args.format == "tusimple":
        preds = {r.raw_file: r for r in D.read_tusimple(args.pred, prediction=True)}
        results = []
        for gt in D.read_tusimple(args.gt):
            pr = preds.get(gt.raw_file)
            lanes = LaneSet([]) if pr is None else _tusimple_pred_lanes(pr, gt.h_samples)
            results.append(tusimple_accuracy(lanes, gt, args.px_threshold))
        total = merge(results)
        print(json.dumps(total.to_dict()))
        print(f"accuracy {100 * total.accuracy:.2f}  ({total.n_correct}/{total.n_gt} points, {len(results)} images)")
        return 0

    gt_root, pred_root = Path(args.gt), Path(args.pred)
    gt_files = sorted(gt_root.rglob("*.lines.txt")) if gt_root.is_dir() else [gt_root]
    per_image = {}
    for g in gt_files:
        rel = g.relative_to(gt_root) if gt_root.is_dir() else Path(g.name)
        p = pred_root / rel if pred_root.is_dir() else pred_root
        pred = D.read_culane(p).to_laneset() if p.exists() else LaneSet([])
        gt = D.read_culane(g).to_laneset()
        per_image[str(rel)] = culane_f1(pred, gt, args.iou, image_size=tuple(args.image_size or D.CULANE_SIZE))
    total = merge(per_image.values())
    print(json.dumps(total.to_dict()))
    print(f"F1 {100 * total.f1:.2f}  precision {100 * total.precision:.2f}  recall {100 * total.recall:.2f}")
    if args.per_category is not None:
        lookup = _category_lists(args.per_category) if args.per_category else {}
        groups: dict[str, list] = {}
        for rel, res in per_image.items():
            tag = lookup.get(_safe_name(rel)) or Path(rel).parts[0]
            groups.setdefault(tag, []).append(res)
        report = category_report(groups)
        print(json.dumps({"categories": report}))
        print(format_report(report))
    return 0


def _tusimple_pred_lanes(rec: D.TuSimpleRecord, h_samples) -> LaneSet:
    # predictions may omit h_samples; they are aligned to the ground truth rows
    hs = rec.h_samples if rec.h_samples else h_samples
    return D.TuSimpleRecord(rec.raw_file, list(hs), rec.lanes).to_laneset()


# -- predict -------------------------------------------------------------------


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def cmd_predict(args) -> int:
    import torch
    from PIL import Image

    from .pipeline import load_model

    model = load_model(args.checkpoint)
    cfg = model.cfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for name in args.images:
        path = Path(name)
        img = _load_image(path)
        h0, w0 = img.shape
        if (w0, h0) != cfg.input_size:
            net = np.asarray(Image.fromarray(img).resize(cfg.input_size, Image.BILINEAR), dtype=np.float32)
        else:
            net = img
        t0 = time.perf_counter()
        # grayscale input is replicated across the model's input channels
        x = torch.from_numpy(np.array(net, dtype=np.float32))[None, None].expand(-1, cfg.in_channels, -1, -1)
        lanes = model.predict(x, threshold=args.threshold)[0]
        run_ms = 1000 * (time.perf_counter() - t0)
        lanes = lanes.scaled(w0 / cfg.width, h0 / cfg.height)
        if args.format == "tusimple":
            hs = list(range(args.h_start, h0, args.h_step))
            records.append(D.TuSimpleRecord.from_laneset(path.name, lanes, hs, run_time=run_ms))
        else:
            text = D.export_culane(D.CULaneRecord.from_laneset(str(path), lanes))
            (out / D.culane_lines_path(path.name)).write_text(text)
        if args.overlay:
            write_png(out / f"{path.stem}.overlay.png", overlay(img, lanes))
    if records:
        (out / "predictions.json").write_text(D.export_tusimple(records))
    print(json.dumps({"images": len(args.images), "out": str(out)}))
    return 0


# -- train-toy -----------------------------------------------------------------


def cmd_train_toy(args) -> int:
    from .pipeline import PipelineConfig, save_model, train_toy

    cfg = PipelineConfig.toy(ablation=args.ablation, seed=args.seed, difficulty=args.difficulty)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path, loss_path = out / "trace.jsonl", out / "losses.jsonl"
    for p in (trace_path, loss_path):
        p.unlink(missing_ok=True)

    def log(row):
        append_jsonl(trace_path, row)
        if not args.quiet:
            print(json.dumps(row), flush=True)

    t0 = time.perf_counter()
    res = train_toy(None, cfg, args.epochs, args.scenes, log=log, deterministic=args.deterministic,
                    step_log=lambda row: append_jsonl(loss_path, row))
    save_model(out / "model.hlwt", res.model)
    print(json.dumps({"accuracy": res.final_accuracy, "seconds": time.perf_counter() - t0,
                      "checkpoint": str(out / "model.hlwt")}))
    return 0


# -- dht-bench -----------------------------------------------------------------


def cmd_dht_bench(args) -> int:
    from .dht import bench

    print(json.dumps(bench(args.h, args.w, args.theta, args.r, args.iters, args.channels,
                           deterministic=args.deterministic)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="houghlane", description=__doc__)
    ap.add_argument("--deterministic", action="store_true",
                    help="single-threaded, ordered reductions (overrides HOUGHLANE_THREADS)")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("build-labels", help="annotations -> HMAP Hough labels and PNG previews")
    p.add_argument("--format", choices=sorted(PROFILES), default="tusimple")
    p.add_argument("annotations", nargs="+", help="TuSimple JSON-lines files or CULane .lines.txt files/dirs")
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"), help="annotation image size")
    p.add_argument("--input-size", type=int, nargs=2, metavar=("W", "H"), help="network input size")
    p.add_argument("--splat-radius", type=int, default=3)
    p.add_argument("--no-png", action="store_true")
    p.set_defaults(func=cmd_build_labels)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--format", choices=sorted(PROFILES), required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--per-category", nargs="?", const="", default=None, metavar="LIST_DIR",
                   help="CULane per-category table; categories come from <tag>.txt lists in LIST_DIR "
                        "or from the first directory of each relative path")
    p.add_argument("--px-threshold", type=float, default=20.0)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="checkpoint + images -> prediction files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+", help="grayscale PNG/JPEG or .npy images")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=sorted(PROFILES), default="tusimple")
    p.add_argument("--threshold", type=float, help="NMS score threshold (default: the checkpoint's)")
    p.add_argument("--h-start", type=int, default=0)
    p.add_argument("--h-step", type=int, default=2)
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("train-toy", help="train the toy model on synthetic scenes")
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--ablation", default="full")
    p.add_argument("--difficulty", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("dht-bench", help="time the forward DHT")
    p.add_argument("--h", type=int, default=90)
    p.add_argument("--w", type=int, default=160)
    p.add_argument("--theta", type=int, default=80)
    p.add_argument("--r", type=int, default=80)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--channels", type=int, default=1)
    p.set_defaults(func=cmd_dht_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd in ("predict", "train-toy"):
        _configure_threads(args.deterministic)
    try:
        return args.func(args)
    except (D.AnnotationError, ValueError, FileNotFoundError) as exc:
        print(f"houghlane {args.cmd}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
