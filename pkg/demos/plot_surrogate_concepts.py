"""
From a surrogate classifier to local and global concepts
========================================================

Build the auxiliary dataset for the ``disc`` class, fine-tune a binary
surrogate on it, then read off the top concepts of single images and the
concept clusters shared across images.
"""

from pathlib import Path

import numpy as np
import torch

from ucbs import (
    TrainingConfig,
    adapt_to_binary,
    build_auxiliary_dataset,
    evaluate_validation,
    extract_global,
    extract_local,
    fine_tune,
    make_base_model,
    make_validation_scenarios,
    render_score_map,
    slic_segment,
)
from ucbs.synthetic import make_shapes

torch.set_num_threads(1)
out = Path("demo_output")
out.mkdir(exist_ok=True)

discs = [im for im, _ in make_shapes(80, "disc", seed=0, prefix="disc_train")]
squares = [im for im, _ in make_shapes(80, "square", seed=0, prefix="square_train")]
val = make_shapes(30, "disc", seed=1, prefix="disc_val")
val_neg = [im for im, _ in make_shapes(30, "square", seed=1, prefix="square_val")]

###############################################################################
# Auxiliary dataset: every original disc image, the superpixels of a few of
# them (label 1) and square images acting as out-of-distribution negatives.

aux = build_auxiliary_dataset(discs, squares, m=10, k=16, n_ood=80, seed=0, target_class="disc")
print("auxiliary parts:", aux.counts())

###############################################################################
# Fine-tune. The base network is a randomly initialised 10-way CNN; the
# surrogate keeps its backbone and swaps in a 2-way head.

base = make_base_model(num_classes=10, input_size=64, seed=0)
surrogate = adapt_to_binary(base, "disc", seed=0)
scenarios = make_validation_scenarios([im for im, _ in val], val_neg, n_neg=30, seed=0)
cfg = TrainingConfig(lambda1=1.0, lambda2=1.0, epochs=20, learning_rate=0.01, batch_size=32, seed=0)
model, log = fine_tune(surrogate, aux, cfg, validation=scenarios)
for e in log.epochs:
    print(f"epoch {e['epoch']:2d}  loss {e['total']:.4f}  val_equal {e['validation']['val_equal']:.3f}")
for sc in scenarios:
    print(sc.kind, "accuracy", evaluate_validation(model, sc).accuracy)

###############################################################################
# Local concepts: the three highest-scoring superpixels of one image.

image, obj = val[0]
mask = slic_segment(image, 16)
local = extract_local(model, image, mask, p=3)
for s in local.top:
    seg = mask.labels == s.segment_index
    iou = (seg & obj).sum() / (seg | obj).sum()
    print(f"segment {s.segment_index:2d}  score {s.score:7.3f}  IoU with disc {iou:.2f}")
render_score_map(image, mask, local.all_scores, out / "local_heatmap.png")
print("wrote", out / "local_heatmap.png")

###############################################################################
# Global concepts: cluster the top-3 concepts of 20 images and keep the
# three most populous clusters.

images = [im for im, _ in val[:20]]
g = extract_global(model, images, p=3, K=5, g=3, r=3, k=16)
print("candidates:", g.n_candidates)
for c, reps in zip(g.clusters, g.representatives):
    shown = ", ".join(f"{m.image_id}#{m.segment_index}" for m in reps)
    print(f"cluster {c.cluster_id}: {c.population} members, mean cost {c.mean_cost:.3f} -> {shown}")
print("zero-canvas logits:", np.round(model.logits(np.zeros((1, 64, 64, 3), np.float32))[0], 3))
