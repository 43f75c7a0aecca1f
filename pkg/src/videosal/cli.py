"""Command line for the saliency package.

Subcommands: gen-data, train, infer, eval, gradcheck, ablate.
Exit codes: 0 success, 1 usage, 2 data/format problems, 3 numerical
failure (gradient check above tolerance).

Clip directories hold ``frames.stsa`` (L, 3, H, W), ``density.stsa``
(L, H, W), and ``fixations.txt`` with ``frame x y`` lines.  Inference
writes ``pred_NNNN.stsa`` and ``pred_NNNN.pgm`` per frame.  The
``STSA_THREADS`` env var caps evaluation workers (default 1, which keeps
output byte-stable trivially; results are order-merged either way).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as fileio
from .data import SyntheticScene, gen_synthetic_clip
from .errors import VideosalError
from .gradcheck import TOLERANCE, check_micro_model, op_checks
from .model import (ModelConfig, SaliencyModel, Trainer, configs_from_file,
                    load_checkpoint, save_checkpoint, sliding_window_predict)
from .autograd import ParameterStore
from .saliency import frame_metrics

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CSV_COLUMNS = ("clip", "frame", "CC", "NSS", "SIM", "KL", "AUC", "sAUC")

ABLATION_VARIANTS = {
    "no-stsa-1": {"remove_attention": (0,)},
    "no-stsa-2": {"remove_attention": (1,)},
    "no-stsa-3": {"remove_attention": (2,)},
    "no-stsa-4": {"remove_attention": (3,)},
    "no-temporal": {"variant": "no_temporal_relations"},
    "single-sim": {"variant": "single_similarity"},
    "no-aw": {"use_weighting": False},
    "no-stms": {"use_multiscale": False},
    "concat-fusion": {"fusion": "concat"},
    "no-layer1": {"use_layer1": False},
    "no-layer2": {"use_layer2": False},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="videosal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic clips")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=24)
    g.add_argument("--height", type=int, default=48)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--blobs", type=int, default=2)

    t = sub.add_parser("train", help="train on a clip directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--supervision", choices=("middle", "last"), default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--quiet", action="store_true")

    i = sub.add_parser("infer", help="predict per-frame maps for one clip")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video", required=True)
    i.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--csv", default=None)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--micro", action="store_true",
                   help="also sweep every parameter of the full micro model")
    c.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="train and score one ablation variant")
    a.add_argument("--variant", required=True, choices=sorted(ABLATION_VARIANTS))
    a.add_argument("--data", required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--out", default=None)
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--se-relu-first", action="store_true",
                   help="run the gate bottleneck as conv-relu-norm instead of conv-norm-relu")
    a.add_argument("--quiet", action="store_true")
    return p


def cmd_gen_data(args) -> int:
    scene = SyntheticScene(n_blobs=args.blobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.clips):
        clip_dir = out / f"clip_{i:03d}"
        clip_dir.mkdir(exist_ok=True)
        frames, density, fixations = gen_synthetic_clip(
            scene, args.frames, args.height, args.width, seed=args.seed + i)
        fileio.write_tensor(clip_dir / "frames.stsa", frames)
        fileio.write_tensor(clip_dir / "density.stsa", density)
        fileio.write_fixations(clip_dir / "fixations.txt", fixations)
    print(f"wrote {args.clips} clips to {out}")
    return EXIT_OK


def load_clip_dir(path: Path):
    frames = fileio.read_tensor(path / "frames.stsa")
    density = fileio.read_tensor(path / "density.stsa")
    fixations = fileio.read_fixations(path / "fixations.txt", frames.shape[0])
    return frames, density, fixations


def _clip_dirs(root: Path):
    dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not dirs and (root / "frames.stsa").exists():
        return [root]
    if not dirs:
        raise VideosalError(f"{root}: no clip directories found")
    return dirs


def _train_model(data_dir, config_path, variant_overrides, supervision, steps,
                 seed, log):
    model_cfg, train_cfg = configs_from_file(config_path)
    if variant_overrides:
        model_cfg = replace(model_cfg, **variant_overrides)
    if supervision is not None:
        model_cfg = replace(model_cfg, supervision=supervision)
    if steps is not None:
        train_cfg = replace(train_cfg, steps=steps)
    if seed is not None:
        model_cfg = replace(model_cfg, seed=seed)
        train_cfg = replace(train_cfg, seed=seed)
    clips = []
    for d in _clip_dirs(Path(data_dir)):
        frames, density, _ = load_clip_dir(d)
        clips.append((frames, density))
    store = ParameterStore()
    model = SaliencyModel(store, model_cfg)
    trainer = Trainer(model, clips, train_cfg)
    trainer.run(train_cfg.steps, log=log)
    return model, trainer


def cmd_train(args) -> int:
    log = None if args.quiet else print
    model, trainer = _train_model(args.data, args.config, None, args.supervision,
                                  args.steps, args.seed, log)
    save_checkpoint(args.out, model, trainer)
    print(f"checkpoint written to {args.out} after {trainer.step} steps "
          f"(final smoothed loss {trainer.ema:.6f})")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    frames, _, _ = load_clip_dir(Path(args.video))
    maps = sliding_window_predict(model, frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(maps.shape[0]):
        fileio.write_tensor(out / f"pred_{i:04d}.stsa", maps[i])
        fileio.write_pgm(out / f"pred_{i:04d}.pgm", maps[i])
    print(f"wrote {maps.shape[0]} maps to {out}")
    return EXIT_OK


def _load_predictions(path: Path):
    files = sorted(path.glob("pred_*.stsa"))
    if not files:
        raise VideosalError(f"{path}: no pred_*.stsa files found")
    return np.stack([fileio.read_tensor(f) for f in files])


def _format_row(clip, frame, row):
    cells = [f"{row[k]:.6f}" for k in CSV_COLUMNS[2:]]
    return [clip, str(frame)] + cells


def cmd_eval(args) -> int:
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    gt_dirs = {d.name: d for d in _clip_dirs(gt_root)}
    pred_dirs = {d.name: d for d in _clip_dirs(pred_root)}
    names = sorted(gt_dirs)
    if sorted(pred_dirs) != names:
        raise VideosalError(
            f"prediction clips {sorted(pred_dirs)} do not match ground truth {names}")
    gt = {name: load_clip_dir(gt_dirs[name]) for name in names}
    shuffle_sets = {}
    for name in names:
        pool = set()
        for other in names:
            if other != name:
                for pts in gt[other][2]:
                    pool.update(pts)
        shuffle_sets[name] = sorted(pool)

    tasks = []
    for name in names:
        preds = _load_predictions(pred_dirs[name])
        _, density, fixations = gt[name]
        if preds.shape[0] != density.shape[0]:
            raise VideosalError(f"{name}: {preds.shape[0]} predictions for "
                                f"{density.shape[0]} ground-truth frames")
        for t in range(preds.shape[0]):
            tasks.append((name, t, preds[t], density[t], fixations[t], shuffle_sets[name]))

    workers = int(os.environ.get("STSA_THREADS", "1"))

    def score(task):
        name, t, pred, density, fixations, shuffle = task
        return name, t, frame_metrics(pred, density, fixations, shuffle)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, tasks))
    else:
        rows = [score(t) for t in tasks]

    table = [_format_row(name, t, row) for name, t, row in rows]
    widths = [max(len(h), *(len(r[i]) for r in table))
              for i, h in enumerate(CSV_COLUMNS)]
    print("  ".join(h.ljust(w) for h, w in zip(CSV_COLUMNS, widths)))
    for r in table:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    means = {k: float(np.nanmean([row[k] for _, _, row in rows])) for k in CSV_COLUMNS[2:]}
    mean_row = ["mean", "-"] + [f"{means[k]:.6f}" for k in CSV_COLUMNS[2:]]
    print("  ".join(c.ljust(w) for c, w in zip(mean_row, widths)))

    if args.csv:
        lines = [",".join(CSV_COLUMNS)]
        lines += [",".join(r) for r in table]
        Path(args.csv).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for name, err in op_checks(args.seed):
        worst = max(worst, err)
        print(f"{name:32s} max rel err {err:.3e}  "
              f"{'ok' if err < TOLERANCE else 'FAIL'}")
    if args.micro:
        print("sweeping every parameter of the micro model ...")
        micro_worst, per_param = check_micro_model(args.seed)
        for name, err, size in per_param:
            print(f"micro {name:28s} ({size:4d} values) max rel err {err:.3e}  "
                  f"{'ok' if err < TOLERANCE else 'FAIL'}")
        worst = max(worst, micro_worst)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    if worst >= TOLERANCE:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args) -> int:
    overrides = dict(ABLATION_VARIANTS[args.variant])
    if args.se_relu_first:
        overrides["relu_before_norm"] = True
    log = None if args.quiet else print
    model, trainer = _train_model(args.data, args.config, overrides, None,
                                  args.steps, args.seed, log)
    if args.out:
        save_checkpoint(args.out, model, trainer)
    print(f"variant {args.variant}: steps {trainer.step} "
          f"final smoothed loss {trainer.ema:.6f}")
    return EXIT_OK


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return _DISPATCH[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VideosalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
