"""Command-line entry point: generate, train, score, localize, evaluate, export-curves.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .evaluation import correctness_analysis, mean_ap, short_class_split
from .localization import ConfigError, TrackScores, localize_all, median_filter, threshold_segment
from .pipeline import architecture_for, labeled_tracks
from .recurrent import TrainingError, forward, train_scorer
from .recurrent.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .recurrent.network import ModelError
from .synthetic import SpecError, generate
from .tracks import InputError, assign_frame_labels

log = logging.getLogger("trackloc")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4
SPLITS = ("train", "test")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(root: Path, extra: dict) -> dict:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = dict(extra)
    manifest["files"] = {p.relative_to(root).as_posix(): _digest(p) for p in files}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def cmd_generate(cfg) -> None:
    root = cfg.path("data")
    root.mkdir(parents=True, exist_ok=True)
    lengths = {}
    for split, count_key in zip(SPLITS, ("n_videos", "test_videos")):
        ds = generate(cfg.synthetic_spec(count_key), split)
        (root / split).mkdir(exist_ok=True)
        io.write_tracks(root / split / "tracks.jsonl", ds.tracks)
        io.write_ground_truth(root / split / "gt.jsonl", ds.ground_truth)
        lengths.update(ds.video_lengths)
    spec = cfg.synthetic_spec()
    _write_manifest(root, {"n_classes": spec.n_classes, "streams": list(spec.streams),
                           "video_lengths": lengths, "seed": cfg.seed})
    log.info("wrote dataset to %s", root)


def _manifest(cfg) -> dict:
    path = cfg.path("data") / "manifest.json"
    if not path.is_file():
        raise io.DataError(f"{path} not found; run `generate` first")
    return json.loads(path.read_text())


def _split_files(cfg, split):
    root = cfg.path("data") / split
    return root / "tracks.jsonl", root / "gt.jsonl"


def cmd_train(cfg) -> None:
    manifest = _manifest(cfg)
    t = cfg.parser["train"]
    tracks_path, gt_path = _split_files(cfg, t["split"])
    tracks, gts = io.read_tracks(tracks_path), io.read_ground_truth(gt_path)
    if not tracks:
        raise io.DataError(f"{tracks_path} holds no tracks")
    streams = manifest["streams"] if t["fusion"] != "single" else manifest["streams"][:1]
    arch = architecture_for(tracks, manifest["n_classes"], streams, fusion=t["fusion"], cell=t["cell"],
                            hidden=t.getint("hidden"), norm_dim=t.getint("norm_dim"),
                            norm_activation=t["norm_activation"])
    res = train_scorer(labeled_tracks(tracks, gts), arch, cfg.train_config())
    out = cfg.path("model")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.rln", res.model)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((i, repr(float(v))) for i, v in enumerate(res.losses))
    log.info("trained %s/%s model, final loss %.4f", arch.cell, arch.fusion, res.losses[-1])


def _score_name(track) -> str:
    return f"{track.video_id}__{track.track_id}.tfv"


def cmd_score(cfg) -> None:
    model = load_checkpoint(cfg.path("model") / "checkpoint.rln")
    split = cfg.get("localize", "split")
    tracks = io.read_tracks(_split_files(cfg, split)[0])
    for tr in tracks:
        for s, d in zip(model.arch.streams, model.arch.input_dims):
            if s not in tr.features or tr.features[s].shape[1] != d:
                got = tr.features[s].shape[1] if s in tr.features else "missing"
                raise io.DataError(f"track {tr.video_id}/{tr.track_id}: stream {s!r} has "
                                   f"dimension {got}, checkpoint expects {d}")
    out = cfg.path("scores") / split
    out.mkdir(parents=True, exist_ok=True)

    def run(tr):
        return forward(model, {s: tr.features[s] for s in model.arch.streams})[0]

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        results = list(pool.map(run, tracks))
    for tr, probs in zip(tracks, results):
        io.write_tfv(out / _score_name(tr), probs)
    log.info("scored %d tracks", len(tracks))


def _scored_tracks(cfg, split):
    tracks = io.read_tracks(_split_files(cfg, split)[0], load_features=False)
    root = cfg.path("scores") / split
    out = []
    for tr in tracks:
        path = root / _score_name(tr)
        if path.is_file():
            scores = io.read_tfv(path)
            if len(scores) != len(tr):
                raise io.DataError(f"{path}: {len(scores)} rows for a {len(tr)}-frame track")
            out.append(TrackScores(tr, scores))
    return out


def cmd_localize(cfg) -> None:
    split = cfg.get("localize", "split")
    dets = localize_all(_scored_tracks(cfg, split), cfg.localization_config(),
                        cfg.get("localize", "method"), cfg.viterbi_config())
    path = cfg.path("detections")
    path.parent.mkdir(parents=True, exist_ok=True)
    io.write_detections(path, dets)
    log.info("wrote %d detections to %s", len(dets), path)


def cmd_evaluate(cfg) -> None:
    manifest = _manifest(cfg)
    split = cfg.get("localize", "split")
    gts = io.read_ground_truth(_split_files(cfg, split)[1])
    dets = io.read_detections(cfg.path("detections"))
    short = cfg.short_classes
    if short == "auto":
        lengths = manifest["video_lengths"]
        subset = tuple(short_class_split(gts, lengths)) or None
    elif short == "none":
        subset = None
    else:
        subset = short
    classes = range(1, manifest["n_classes"] + 1)
    table = mean_ap(dets, gts, cfg.eval_config(subset), classes=classes)
    path = cfg.path("results")
    path.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(path)
    for t in table.thresholds:
        log.info("mAP@%.2f = %.4f", t, table.map(t))
    combos = cfg.assumptions
    if combos:
        iou_t = cfg.parser.getfloat("evaluate", "assumption_iou")
        with open(path.with_name(path.stem + "_correctness.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iou_threshold", "classification", "spatial", "temporal", "map", "map_subset"])
            for combo in combos:
                tab = correctness_analysis(dets, gts, combo, iou_t, class_subset=subset, classes=classes)
                w.writerow([repr(iou_t)] + [int(a in combo) for a in ("classification", "spatial", "temporal")]
                           + [repr(tab.map(iou_t)), repr(tab.map_subset(iou_t))])


CURVE_COLUMNS = ["frame", "class_id", "raw_score", "filtered_score", "label", "segment"]


def cmd_export_curves(cfg) -> None:
    """One CSV per track: per frame and class, raw/filtered score, label, segment index (-1 outside)."""
    split = cfg.get("localize", "split")
    gts = io.read_ground_truth(_split_files(cfg, split)[1])
    loc = cfg.localization_config()
    out = cfg.path("curves") / split
    out.mkdir(parents=True, exist_ok=True)
    for item in _scored_tracks(cfg, split):
        tr = item.track
        labels = assign_frame_labels(tr, [g for g in gts if g.video_id == tr.video_id])
        with open(out / f"{tr.video_id}__{tr.track_id}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_COLUMNS)
            for c in range(1, item.scores.shape[1]):
                raw = item.scores[:, c]
                filt = median_filter(raw, loc.median_window)
                seg = np.full(len(raw), -1)
                for k, (a, b) in enumerate(threshold_segment(filt, loc.theta)):
                    seg[a:b + 1] = k
                for t in range(len(raw)):
                    w.writerow([tr.start_frame + t, c, repr(float(raw[t])), repr(float(filt[t])),
                                int(labels[t]), int(seg[t])])


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "score": cmd_score,
            "localize": cmd_localize, "evaluate": cmd_evaluate, "export-curves": cmd_export_curves}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output root directory")
    common.add_argument("--jobs", type=int, help="worker threads for per-track work")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="trackloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    from .config import RunConfig

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.overrides, args.seed, args.out, args.jobs)
        COMMANDS[args.command](cfg)
    except (ConfigError, SpecError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training diverged: {exc} (last finite loss {exc.last_finite_loss})", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
