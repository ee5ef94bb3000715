"""
Scoring explanations with the metric suite
==========================================

A toy model whose target logit is a weighted pixel sum makes every metric
easy to reason about: ranking segments by their true weight is the best
possible explanation, and a shuffled ranking is a poor one.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ucbs import ConceptScore, Image, SegmentMask
from ucbs.concepts import rank_scores
from ucbs.metrics import (
    auc,
    faithfulness,
    friedman_test,
    insertion_deletion_curve,
    sensitivity_sweep,
    ssc,
    sdc,
)

out = Path("demo_output")
out.mkdir(exist_ok=True)
rng = np.random.default_rng(0)


class LinearModel:
    target = 1

    def __init__(self, weights):
        self.weights = weights

    def logits(self, images):
        t = (np.asarray(images) * self.weights).reshape(len(images), -1).sum(axis=1)
        return np.stack([np.zeros_like(t), t], axis=1)


# a 4x4 grid of segments over a 32x32 image of ones
labels = (np.arange(32)[:, None] // 8) * 4 + np.arange(32)[None, :] // 8
mask = SegmentMask(labels.astype(np.int32), 16)
seg_w = rng.normal(0, 0.8, size=16)
# mean weight 0.25: the intact image is confidently on the target side
seg_w += 0.25 - seg_w.mean()
weights = np.repeat((seg_w[labels] / 64)[:, :, None], 3, axis=2) / 3
model = LinearModel(weights)
image = Image(np.ones((32, 32, 3)), "ones")


def ranking(scores):
    return rank_scores([ConceptScore(i, float(s), image.id) for i, s in enumerate(scores)])


true = ranking(seg_w)
shuffled = ranking(rng.permutation(seg_w))

###############################################################################
# Insertion adds segments to a black canvas, deletion removes them from the
# image. Good rankings insert fast and delete fast.

fig, ax = plt.subplots(figsize=(5, 3.5))
for name, ranked in (("true weights", true), ("shuffled", shuffled)):
    for mode, style in (("insertion", "-"), ("deletion", "--")):
        c = insertion_deletion_curve(model, image, mask, ranked, mode)
        ax.plot(c.xs, c.ys, style, label=f"{name} {mode} (AUC {auc(c):.2f})")
ax.set_xlabel("fraction of concepts")
ax.set_ylabel("target probability")
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(out / "insertion_deletion.png", dpi=100)
print("wrote", out / "insertion_deletion.png")

###############################################################################
# Correlation metrics: prediction drop against summed scores.

print("sensitivity-n, true:", sensitivity_sweep(model, image, mask, seg_w, samples=50))
print("faithfulness, true: %.3f" % faithfulness(model, image, mask, seg_w, samples=50))
print("faithfulness, shuffled: %.3f"
      % faithfulness(model, image, mask, [s.score for s in sorted(shuffled, key=lambda s: s.segment_index)],
                     samples=50))

###############################################################################
# Smallest sufficient / destroying concept sets.

print("SSC true %d, shuffled %d" % (ssc(model, image, mask, true), ssc(model, image, mask, shuffled)))
print("SDC true %s, shuffled %s" % (sdc(model, image, mask, true), sdc(model, image, mask, shuffled)))

###############################################################################
# Friedman test over a (classes x models) accuracy table.

acc = np.sort(rng.uniform(0.6, 0.95, size=(8, 3)), axis=1)
res = friedman_test(acc, treatments=["small", "medium", "large"])
print("mean ranks", res.mean_ranks, "chi2 %.2f p %.4f reject %s" % (res.statistic, res.p_value, res.reject_h0))
