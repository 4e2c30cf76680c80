"""Command-line entry points: generate, train, eval, predict, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Errors print a single ``<kind>-error: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import gc
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (
    AnnotationBoundsError,
    AnnotationParseError,
    SceneConfigError,
    SequenceMeta,
    SyntheticSceneConfig,
    frame_filename,
    load_split,
    read_sequence,
    save_annotations,
    split_dataset,
    synthesize_sequence,
    write_manifest,
    write_ppm,
    write_sequence,
)
from .data.annotations import PointAnnotationSet
from .evaluation import evaluate_split, predict_frame, write_csv
from .model import ModelConfigError, init_params
from .train import AdamState, NumericFailure, TrainingSet, train

log = logging.getLogger("vidcount")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
CROSS_COLOR = np.array([255, 32, 32], dtype=np.uint8)


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out_dir) -> Path:
    """Write a synthetic corpus plus manifest under ``out_dir``."""
    out = Path(out_dir)
    d = cfg.data
    if len(d.splits) != 3:
        raise ConfigError("[data] splits needs three counts (train, val, test)")
    ids = []
    for i in range(d.num_sequences):
        sid = f"seq_{i:03d}"
        scene = SyntheticSceneConfig(
            frame_size=(d.frame_height, d.frame_width), num_frames=d.num_frames,
            count_range=(d.count_min, d.count_max), object_radius_range=(d.radius_min, d.radius_max),
            blend=d.blend, max_speed=d.max_speed, seed=cfg.train.seed ^ i, fps=d.fps, sequence_id=sid)
        seq, pts = synthesize_sequence(scene)
        write_sequence(out / sid, seq, pts)
        ids.append(sid)
    try:
        train_ids, val_ids, test_ids = split_dataset(ids, d.splits)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_manifest(out, ids, {"train": train_ids, "val": val_ids, "test": test_ids},
                   {"seed": cfg.train.seed})
    return out


def _split(data_dir, name):
    try:
        return load_split(data_dir, name)
    except KeyError as exc:
        raise DataError(exc.args[0]) from None


def cmd_train(cfg: RunConfig, out_dir, data_dir=None, resume=None):
    """Train on the manifest's train split; writes checkpoint.bin and train_log.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = TrainingSet(_split(data_dir or cfg.data.data_dir, "train"), cfg.model.sigma)
    if resume:
        params, extra, meta = load_checkpoint(resume)
        if params.config != cfg.model:
            raise ConfigError("checkpoint model config differs from the run config")
        state = AdamState.from_arrays(int(meta.get("step", 0)), extra)
    else:
        params, state = init_params(cfg.model, cfg.train.seed), AdamState()
    train_log = train(params, data, cfg, state, checkpoint_path=out / "checkpoint.bin")
    train_log.write(out / "train_log.csv")
    return params, train_log


def cmd_eval(checkpoint, split: str, cfg: RunConfig, out_dir, data_dir=None):
    params, _, _ = load_checkpoint(checkpoint)
    sequences = _split(data_dir or cfg.data.data_dir, split)
    report, rows = evaluate_split(params, sequences, cfg.inference.threshold)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"metrics_{split}.csv", rows)
    print(report.render())
    return report, rows


def draw_cross(img: np.ndarray, x: float, y: float, color=CROSS_COLOR) -> None:
    h, w = img.shape[:2]
    cx, cy = int(np.floor(x)), int(np.floor(y))
    for dx, dy in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
        px, py = cx + dx, cy + dy
        if 0 <= px < w and 0 <= py < h:
            img[py, px] = color


def cmd_predict(checkpoint, sequence_dir, out_dir, threshold: float = 0.3):
    """Overlay predicted points on every frame and export them as annotations."""
    params, _, _ = load_checkpoint(checkpoint)
    seq, _ = read_sequence(sequence_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stack = seq.stack()
    found = PointAnnotationSet()
    for pos, frame in enumerate(seq.frames):
        pts = predict_frame(params, stack, pos, threshold)
        # keep 6-decimal text inside [0, extent)
        pts = np.minimum(pts, [seq.width - 1e-6, seq.height - 1e-6])
        found.frames[frame.index] = pts
        img = np.clip(np.round(frame.pixels * 255), 0, 255).astype(np.uint8)
        for x, y in pts:
            draw_cross(img, x, y)
        write_ppm(out / frame_filename(frame.index), img)
        (out / f"frame_{frame.index:06d}.txt").write_text(f"{len(pts)}\n", encoding="utf-8")
    meta = SequenceMeta(seq.sequence_id, seq.fps, seq.width, seq.height,
                        [f.index for f in seq.frames])
    save_annotations(out / "predictions.json", meta, found)
    return found


ABLATION_HEADER = ("mode", "T", "MAE", "MSE", "NAE", "wall_seconds")


def cmd_ablate(cfg: RunConfig, out_dir, data_dir=None):
    """Train and score every (query mode, frames) cell under one seed."""
    data_dir = data_dir or cfg.data.data_dir
    train_seqs = _split(data_dir, "train")
    eval_seqs = _split(data_dir, cfg.inference.split)
    rows = []
    for mode in ("add", "concat"):
        for frames in (1, 5):
            mc = replace(cfg.model, query_mode=mode, frames=frames, reference_frame=frames // 2)
            cell = replace(cfg, model=mc)
            gc.collect()  # keep collection of earlier cells' garbage out of this cell's timing
            start = time.perf_counter()
            params = init_params(mc, cfg.train.seed)
            train(params, TrainingSet(train_seqs, mc.sigma), cell)
            report, _ = evaluate_split(params, eval_seqs, cfg.inference.threshold)
            wall = time.perf_counter() - start
            rows.append((mode, frames, report.mae, report.mse, report.nae, wall))
            log.info("ablation %s T=%d: %s (%.1fs)", mode, frames, report.render(), wall)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for mode, frames, mae, mse, nae, wall in rows:
            w.writerow((mode, frames, f"{mae:.6f}", f"{mse:.6f}", f"{nae:.6f}", f"{wall:.3f}"))
    return rows


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidcount", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int, help="override [train] seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", help="dataset directory (overrides [data] data_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", help="score a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split name (default: [inference] split)")
    p.add_argument("--data")
    p = sub.add_parser("predict", help="render predictions for one sequence")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="sequence directory")
    p = sub.add_parser("ablate", help="query-mode x frames ablation grid")
    common(p)
    p.add_argument("--data")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "generate":
            cmd_generate(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.out, args.data, args.resume)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.split or cfg.inference.split, cfg, args.out, args.data)
        elif args.command == "predict":
            cmd_predict(args.checkpoint, args.sequence, args.out, cfg.inference.threshold)
        elif args.command == "ablate":
            for row in cmd_ablate(cfg, args.out, args.data):
                print("{} T={} MAE {:.3f} MSE {:.3f} NAE {:.3f} {:.1f}s".format(*row))
    except (ConfigError, ModelConfigError, SceneConfigError) as exc:
        print(f"config-error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric-error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, AnnotationParseError, AnnotationBoundsError,
            OSError, ValueError) as exc:
        print(f"data-error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_DATA
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
