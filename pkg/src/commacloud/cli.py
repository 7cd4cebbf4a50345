"""Command-line entry point: ``commacloud <subcommand> [options]``.

Subcommands: ``synth``, ``train-bank``, ``train-model``, ``detect``, ``eval``,
``baseline``.  Tunables come from built-in defaults, then an optional flat
``key=value`` config file (``--config``), then flags.  Every run writes the
resolved configuration beside its outputs.  Exit status is 0 on success,
1 on runtime failure (partial outputs are removed) and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import shutil
import sys
from pathlib import Path

from . import __version__
from .exceptions import CommaCloudError

log = logging.getLogger("commacloud")

# name -> (type, default); shared by the config file and the flags
TUNABLES = {
    "sigma": (float, 120.0),
    "displacement": (str, "0,-10"),
    "span_hours": (float, 5.0),
    "lag_hours": (str, "auto"),
    "p0": (float, 0.5),
    "gamma_threshold": (float, 0.15),
    "intensity_range": (str, "50,200"),
    "linear_threshold": (float, 0.2),
    "positive_iou": (float, 0.5),
    "nms_iou": (float, 0.3),
    "rounds": (int, 40),
    "batches": (int, 100),
    "stack_ratio": (int, 10),
    "train_fraction": (float, 0.6),
    "cv_fraction": (float, 0.15),
    "max_patch_samples": (int, 500),
    "tile": (int, 32),
    "seed": (int, 0),
    "jobs": (int, 0),
}


class UsageError(Exception):
    """Bad configuration detected after argument parsing (exit 2)."""


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path: str | Path, values: dict) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _resolve(args, names, file_values: dict) -> dict:
    resolved = {}
    for name in names:
        typ, default = TUNABLES[name]
        flag = getattr(args, name, None)
        if flag is not None:
            value = flag
        elif name in file_values:
            value = file_values[name]
        else:
            value = default
        try:
            resolved[name] = typ(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {name}: {value!r}") from exc
    return resolved


def _pair(text: str, typ=float) -> tuple:
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if len(parts) != 2:
        raise UsageError(f"expected two comma-separated values, got {text!r}")
    try:
        return tuple(typ(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"bad pair {text!r}") from exc


def _jobs(n: int) -> int:
    return n if n > 0 else (os.cpu_count() or 1)


def _lag(text: str):
    return None if str(text).lower() in ("auto", "none", "") else float(text)


class _Outputs:
    """Track created outputs so a failed run can remove them."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        return path

    def cleanup(self):
        for p in reversed(self.paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _echo_path(out: Path) -> Path:
    return out / "run_config.txt" if out.is_dir() else out.with_name(out.name + ".config.txt")


# --------------------------------------------------------------------------
# Subcommands


def _synth_config(args, file_values):
    from .synth import SynthConfig

    fields = {f.name: f for f in dataclasses.fields(SynthConfig)}
    kwargs = {}
    for key, value in file_values.items():
        if key not in fields:
            raise UsageError(f"unknown synth config key {key!r}")
        default = fields[key].default
        try:
            if isinstance(default, tuple):
                kwargs[key] = tuple(type(default[0])(p) for p in value.split(","))
            elif isinstance(default, bool):
                kwargs[key] = value.lower() in ("1", "true", "yes")
            else:
                kwargs[key] = type(default)(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    if args.seed is not None:
        kwargs["seed"] = args.seed
    try:
        return SynthConfig(**kwargs)
    except CommaCloudError as exc:
        raise UsageError(str(exc)) from exc


def cmd_synth(args, outputs: _Outputs) -> None:
    from .synth import generate_corpus, write_corpus

    file_values = read_config(args.config) if args.config else {}
    cfg = _synth_config(args, file_values)
    out = outputs.add(args.out)
    corpus = generate_corpus(cfg)
    write_corpus(corpus, out)
    write_config(out / "run_config.txt", {"subcommand": "synth", **cfg.to_dict()})
    log.info("wrote %d frames, %d labels, %d storms to %s", len(corpus.frames), len(corpus.labels), len(corpus.storms), out)


def _load_frames(directory):
    from .imagery import load_frames

    frames = load_frames(directory)
    if not frames:
        raise CommaCloudError(f"no frames found in {directory}")
    return frames


def _split_frames(frames, train_fraction, cv_fraction):
    from .proposals import DataPartition

    part = DataPartition.from_timestamps([f.timestamp for f in frames], train_fraction, cv_fraction)
    return part, {name: [f for f in frames if part.split_of(f.timestamp) == name] for name in ("train", "cv", "test")}


def cmd_train_bank(args, outputs: _Outputs) -> None:
    from .segmentation import HighCloudSegmenter

    file_values = read_config(args.config) if args.config else {}
    cfg = _resolve(args, ["sigma", "tile", "seed", "jobs", "train_fraction", "cv_fraction"], file_values)
    frames = _load_frames(args.frames)
    _, splits = _split_frames(frames, cfg["train_fraction"], cfg["cv_fraction"])
    seg = HighCloudSegmenter(cfg["sigma"], cfg["tile"], seed=cfg["seed"], n_jobs=_jobs(cfg["jobs"]))
    seg.fit(splits["train"])
    out = outputs.add(args.out)
    seg.bank_.save(out)
    echo = outputs.add(_echo_path(out))
    write_config(echo, {"subcommand": "train-bank", "frames": args.frames, **cfg})


def _detector_from_cfg(cfg):
    from .detector import CommaDetector

    return CommaDetector(
        sigma=cfg["sigma"],
        displacement=_pair(cfg["displacement"], int),
        span_hours=cfg["span_hours"],
        lag_hours=_lag(cfg["lag_hours"]),
        intensity_range=_pair(cfg["intensity_range"]),
        linear_threshold=cfg["linear_threshold"],
        gamma_threshold=cfg["gamma_threshold"],
        positive_iou=cfg["positive_iou"],
        nms_iou=cfg["nms_iou"],
        p0=cfg["p0"],
        n_rounds=cfg["rounds"],
        n_batches=cfg["batches"],
        stack_ratio=cfg["stack_ratio"],
        train_fraction=cfg["train_fraction"],
        cv_fraction=cfg["cv_fraction"],
        max_patch_samples=cfg["max_patch_samples"],
        seed=cfg["seed"],
        n_jobs=_jobs(cfg["jobs"]),
    )


_MODEL_KEYS = [
    "sigma", "displacement", "span_hours", "lag_hours", "intensity_range", "linear_threshold",
    "gamma_threshold", "positive_iou", "nms_iou", "p0", "rounds", "batches", "stack_ratio",
    "train_fraction", "cv_fraction", "max_patch_samples", "seed", "jobs",
]


def cmd_train_model(args, outputs: _Outputs) -> None:
    from .imagery import read_labels
    from .segmentation import GmmBank

    file_values = read_config(args.config) if args.config else {}
    cfg = _resolve(args, _MODEL_KEYS, file_values)
    frames = _load_frames(args.frames)
    labels = read_labels(args.labels)
    bank = GmmBank.load(args.bank) if args.bank else None
    det = _detector_from_cfg(cfg).fit(frames, labels, bank=bank)
    out = outputs.add(args.out)
    det.bundle_.save(out)
    echo = outputs.add(_echo_path(out))
    write_config(echo, {"subcommand": "train-model", "frames": args.frames, "labels": args.labels, "bank": args.bank or "", **cfg})


def _selected(frames, split, train_fraction, cv_fraction):
    if split == "all":
        return None
    part, _ = _split_frames(frames, train_fraction, cv_fraction)
    return {f.timestamp for f in frames if part.split_of(f.timestamp) == split}


def cmd_detect(args, outputs: _Outputs) -> None:
    from .detector import NMS_IOU, CommaDetector, Detection, ModelBundle, _threshold_and_suppress, draw_overlay, write_detections
    from .imagery import BBox, format_instant, frame_name

    file_values = read_config(args.config) if args.config else {}
    cfg = _resolve(args, ["p0", "train_fraction", "cv_fraction"], file_values)
    if not 0.0 < cfg["p0"] < 1.0:
        raise UsageError("p0 must lie in (0, 1)")
    bundle = ModelBundle.load(args.model)
    frames = _load_frames(args.frames)
    only = _selected(frames, args.split, cfg["train_fraction"], cfg["cv_fraction"])
    det = CommaDetector.from_bundle(bundle)
    cands = det.candidates(frames, only)
    iou_max = bundle.settings.get("nms_iou", NMS_IOU)
    results = {t: _threshold_and_suppress(props, probs, cfg["p0"], iou_max) for t, (props, probs) in cands.items()}
    out = outputs.add(args.out)
    write_detections(out, [d for t in sorted(results) for d in results[t]])
    frames_list = outputs.add(out.with_name(out.name + ".frames.txt"))
    frames_list.write_text("".join(format_instant(t) + "\n" for t in sorted(results)))
    if args.candidates:
        cand_path = outputs.add(args.candidates)
        rows = []
        for t in sorted(cands):
            props, probs = cands[t]
            rows += [Detection(BBox(int(x), int(y), int(s)), float(p), t) for (x, y, s), p in zip(props.boxes, probs)]
        write_detections(cand_path, rows)
    if args.overlay:
        odir = outputs.add(args.overlay)
        odir.mkdir(parents=True, exist_ok=True)
        by_time = {f.timestamp: f for f in frames}
        for t in sorted(results):
            draw_overlay(by_time[t], results[t], odir / frame_name(t))
    echo = outputs.add(_echo_path(out))
    write_config(echo, {"subcommand": "detect", "model": args.model, "frames": args.frames, "split": args.split, **cfg})
    n = sum(len(v) for v in results.values())
    log.info("%d detections on %d frames", n, len(results))


def _read_frame_list(path: Path):
    from .imagery import parse_instant

    return {parse_instant(line) for line in path.read_text().splitlines() if line.strip()}


def cmd_eval(args, outputs: _Outputs) -> None:
    from .detector import read_detections
    from .evaluation import evaluate, summary_text, write_curve
    from .imagery import read_labels, read_storms

    file_values = read_config(args.config) if args.config else {}
    cfg = _resolve(args, ["nms_iou"], file_values)
    dets = read_detections(args.detections)
    sidecar = Path(args.frames_list) if args.frames_list else Path(args.detections + ".frames.txt")
    times = _read_frame_list(sidecar) if sidecar.exists() else {d.timestamp for d in dets}
    by_time = {t: [] for t in times}
    for d in dets:
        by_time.setdefault(d.timestamp, []).append(d)
    cands = None
    if args.candidates:
        cands = {t: [] for t in times}
        for d in read_detections(args.candidates):
            cands.setdefault(d.timestamp, []).append(d)
    grid = [float(g) for g in args.grid.split(",")] if args.grid else [round(0.3 + 0.02 * i, 2) for i in range(21)]
    report = evaluate(by_time, read_labels(args.labels), read_storms(args.storms), cands, grid if cands else None, cfg["nms_iou"])
    out = outputs.add(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text(summary_text(report))
    if report.curve:
        write_curve(out / "curve.csv", report.curve)
    write_config(out / "run_config.txt", {"subcommand": "eval", "detections": args.detections, "labels": args.labels, "storms": args.storms, **cfg})
    sys.stdout.write(summary_text(report))


def cmd_baseline(args, outputs: _Outputs) -> None:
    from .evaluation import INTENSITY_GRID, LAMBDA_GRID, run_baselines, write_pr_curve
    from .imagery import read_storms

    file_values = read_config(args.config) if args.config else {}
    cfg = _resolve(args, ["train_fraction", "cv_fraction", "seed"], file_values)
    frames = _load_frames(args.frames)
    if args.split != "all":
        _, splits = _split_frames(frames, cfg["train_fraction"], cfg["cv_fraction"])
        frames = splits[args.split]
    i_grid = [float(v) for v in args.thresholds.split(",")] if args.thresholds else list(INTENSITY_GRID)
    l_grid = [float(v) for v in args.lambdas.split(",")] if args.lambdas else list(LAMBDA_GRID)
    curves = run_baselines(frames, read_storms(args.storms), i_grid, l_grid, args.spatial_threshold, seed=cfg["seed"])
    out = outputs.add(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pr_curve(out / "baselines.csv", curves["intensity"] + curves["spatial-intensity"])
    write_config(out / "run_config.txt", {"subcommand": "baseline", "frames": args.frames, "storms": args.storms, "split": args.split, **cfg})


# --------------------------------------------------------------------------
# Parser


def _add_tunables(p, names):
    for name in names:
        typ, _ = TUNABLES[name]
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="commacloud", description="Comma-shaped cloud detection pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-bank", help="fit the per-(hour, tile) mixture bank")
    p.add_argument("--config")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    _add_tunables(p, ["sigma", "tile", "seed", "jobs", "train_fraction", "cv_fraction"])
    p.set_defaults(func=cmd_train_bank)

    p = sub.add_parser("train-model", help="train the cascade, weak classifiers and stacker")
    p.add_argument("--config")
    p.add_argument("--frames", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--bank")
    p.add_argument("--out", required=True)
    _add_tunables(p, _MODEL_KEYS)
    p.set_defaults(func=cmd_train_model)

    p = sub.add_parser("detect", help="detect comma clouds in a frame directory")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["all", "train", "cv", "test"], default="all")
    p.add_argument("--candidates", help="also write every scored proposal before thresholding")
    p.add_argument("--overlay", help="directory for graymaps with detections burned in")
    _add_tunables(p, ["p0", "train_fraction", "cv_fraction"])
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against labels and storms")
    p.add_argument("--config")
    p.add_argument("--detections", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--storms", required=True)
    p.add_argument("--candidates")
    p.add_argument("--frames-list", dest="frames_list")
    p.add_argument("--grid", help="comma-separated p0 values for the missing-rate curve")
    p.add_argument("--out", required=True)
    _add_tunables(p, ["nms_iou"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="run both intensity-threshold storm baselines")
    p.add_argument("--config")
    p.add_argument("--frames", required=True)
    p.add_argument("--storms", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["all", "train", "cv", "test"], default="test")
    p.add_argument("--thresholds")
    p.add_argument("--lambdas")
    p.add_argument("--spatial-threshold", dest="spatial_threshold", type=float, default=225.0)
    _add_tunables(p, ["train_fraction", "cv_fraction", "seed"])
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    outputs = _Outputs()
    try:
        args.func(args, outputs)
    except UsageError as exc:
        outputs.cleanup()
        sys.stderr.write(f"commacloud {args.command}: {exc}\n")
        return 2
    except (CommaCloudError, OSError) as exc:
        outputs.cleanup()
        sys.stderr.write(f"commacloud {args.command}: error: {exc}\n")
        return 1
    except BaseException:
        outputs.cleanup()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
