#!/usr/bin/env python3
"""Train the full model and its ablation variants on the same benchmark.

Prints the final smoothed training loss and held-out metrics per variant,
mirroring the structure of the module-level ablation studies.
"""

import argparse
from dataclasses import replace

import numpy as np

from videosal.autograd import ParameterStore
from videosal.data import SyntheticScene, gen_synthetic_clip
from videosal.model import (ModelConfig, SaliencyModel, TrainConfig, Trainer,
                            sliding_window_predict)
from videosal.saliency import frame_metrics

VARIANTS = {
    "full": {},
    "no-temporal": {"variant": "no_temporal_relations"},
    "single-sim": {"variant": "single_similarity"},
    "no-layer1": {"use_layer1": False},
    "no-layer2": {"use_layer2": False},
    "no-stsa-1": {"remove_attention": (0,)},
    "no-stsa-2": {"remove_attention": (1,)},
    "no-stsa-3": {"remove_attention": (2,)},
    "no-stsa-4": {"remove_attention": (3,)},
    "no-aw": {"use_weighting": False},
    "no-stms": {"use_multiscale": False},
    "concat-fusion": {"fusion": "concat"},
}


def evaluate(model, held):
    rows = []
    for idx, (frames, density, fixations) in enumerate(held):
        shuffle = sorted({p for j, (_, _, fx) in enumerate(held) if j != idx
                          for pts in fx for p in pts})
        preds = sliding_window_predict(model, frames)
        for t in range(frames.shape[0]):
            rows.append(frame_metrics(preds[t], density[t], fixations[t], shuffle))
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--only", nargs="*", default=None,
                    help="subset of variants to run")
    args = ap.parse_args()

    scene = SyntheticScene()
    train = [gen_synthetic_clip(scene, 24, 48, 32, seed=100 + i)[:2] for i in range(20)]
    held = [gen_synthetic_clip(scene, 24, 48, 32, seed=900 + i) for i in range(5)]

    names = args.only or list(VARIANTS)
    header = f"{'variant':14s} {'loss':>8s} {'CC':>7s} {'NSS':>7s} {'SIM':>7s} {'KL':>7s} {'AUC':>7s} {'sAUC':>7s}"
    print(header)
    print("-" * len(header))
    for name in names:
        cfg = replace(ModelConfig(seed=args.seed), **VARIANTS[name])
        model = SaliencyModel(ParameterStore(), cfg)
        trainer = Trainer(model, train, TrainConfig(steps=args.steps, seed=args.seed))
        trainer.run(args.steps)
        m = evaluate(model, held)
        print(f"{name:14s} {trainer.ema:8.4f} {m['CC']:7.3f} {m['NSS']:7.3f} "
              f"{m['SIM']:7.3f} {m['KL']:7.3f} {m['AUC']:7.3f} {m['sAUC']:7.3f}")


if __name__ == "__main__":
    main()
