"""Explanation-quality metrics over concept (segment) rankings.

Every function takes a ``model`` exposing ``logits(images) -> (N, C)`` on
(N, H, W, C) arrays and a ``target`` output index. Concepts are removed by
zeroing their pixels; insertion starts from the all-zero canvas.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .concepts import ConceptScore, rank_scores
from .errors import UndefinedCorrelationError, UndefinedRatioError
from .segmentation import Image, SegmentMask


@dataclass(eq=False)
class Curve:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.shape != self.ys.shape or len(self.xs) < 2:
            raise ValueError("curve needs matching xs/ys with at least two points")


@dataclass
class RankedItem:
    """An image with its segmentation and concept ranking.

    ``is_target`` marks membership of the explained class; correctness of a
    prediction means ``argmax == model.target`` matches it.
    """

    image: Image
    mask: SegmentMask
    ranked: list
    is_target: bool = True


@dataclass
class RankingResult:
    mean_ranks: dict
    statistic: float
    p_value: float
    alpha: float
    reject_h0: bool


@dataclass
class MetricReport:
    insertion_auc: Optional[float] = None
    deletion_auc: Optional[float] = None
    sensitivity: Optional[dict] = None
    faithfulness: Optional[float] = None
    ssc: Optional[float] = None
    sdc: Optional[float] = None
    completeness: Optional[dict] = None
    counts: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def to_dict(self):
        return asdict(self)


def derive_seed(seed: int, image_id: str) -> int:
    """Per-image seed so parallel and serial runs draw identical subsets."""
    digest = hashlib.sha256(f"{seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _softmax_target(z: np.ndarray, target: int) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, target] / e.sum(axis=1)


def _score_vector(scores, k: int) -> np.ndarray:
    """Scores indexed by segment label."""
    if len(scores) and isinstance(scores[0], ConceptScore):
        vec = np.full(k, np.nan)
        for s in scores:
            vec[s.segment_index] = s.score
    else:
        vec = np.asarray(scores, dtype=np.float64)
    if vec.shape != (k,) or not np.all(np.isfinite(vec)):
        raise ValueError(f"need one finite score per segment ({k})")
    return vec


def _order(ranked, k: int) -> np.ndarray:
    order = np.array([s.segment_index for s in ranked], dtype=np.int64)
    if len(order) != k or not np.array_equal(np.sort(order), np.arange(k)):
        raise ValueError(f"ranking must cover each of the {k} segments exactly once")
    vals = [s.score for s in ranked]
    if any(a < b for a, b in zip(vals, vals[1:])):
        raise ValueError("ranking must be sorted by descending score")
    return order


def _step_canvases(image: Image, mask: SegmentMask, order: np.ndarray, mode: str) -> np.ndarray:
    """(k + 1, H, W, C) stack; step j inserts/deletes the first j ranked segments."""
    k = mask.k
    rank_of = np.empty(k, dtype=np.int64)
    rank_of[order] = np.arange(k)
    pix_rank = rank_of[mask.labels]
    steps = np.arange(k + 1)[:, None, None]
    keep = pix_rank[None] < steps if mode == "insertion" else pix_rank[None] >= steps
    return np.where(keep[..., None], image.pixels[None], 0).astype(image.pixels.dtype)


def _check_mode(mode):
    if mode not in ("insertion", "deletion"):
        raise ValueError(f"mode must be 'insertion' or 'deletion', got {mode!r}")


def insertion_deletion_curve(model, image: Image, mask: SegmentMask, ranked, mode: str) -> Curve:
    """Target-class probability as ranked concepts are added to / removed from the image."""
    _check_mode(mode)
    k = mask.k
    order = _order(ranked, k)
    canvases = _step_canvases(image, mask, order, mode)
    ys = _softmax_target(model.logits(canvases), model.target)
    # the intact image is scored on its own so both curves share that exact value
    full = _softmax_target(model.logits(image.pixels[None]), model.target)[0]
    ys[k if mode == "insertion" else 0] = full
    return Curve(np.arange(k + 1) / k, ys)


def auc(curve: Curve) -> float:
    """Trapezoidal area under ``curve`` over its x-range."""
    x, y = curve.xs, curve.ys
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def _correct(z: np.ndarray, target: int, is_target: bool) -> np.ndarray:
    return (z.argmax(axis=1) == target) == is_target


def global_accuracy_curves(models: Mapping, items: Sequence[RankedItem], mode: str) -> dict:
    """Per model, dataset accuracy as the ranked concepts are inserted/deleted.

    Each image's correctness curve lives on its own grid ``j / k``; curves are
    linearly interpolated onto the union of those grids before averaging.
    """
    _check_mode(mode)
    if not items:
        raise ValueError("global accuracy curves need at least one image")
    grid = np.unique(np.concatenate([np.arange(it.mask.k + 1) / it.mask.k for it in items]))
    stacks = [_step_canvases(it.image, it.mask, _order(it.ranked, it.mask.k), mode) for it in items]
    out = {}
    for name, model in models.items():
        acc = np.zeros_like(grid)
        for it, canv in zip(items, stacks):
            correct = _correct(model.logits(canv), model.target, it.is_target).astype(np.float64)
            acc += np.interp(grid, np.arange(it.mask.k + 1) / it.mask.k, correct)
        out[name] = Curve(grid, acc / len(items))
    return out


def global_accuracy_auc(models: Mapping, items: Sequence[RankedItem], mode: str) -> dict:
    return {name: auc(c) for name, c in global_accuracy_curves(models, items, mode).items()}


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # test constancy directly: the mean of equal floats need not equal them bit-for-bit
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        which = "prediction drops" if np.ptp(a) == 0 else "score sums"
        raise UndefinedCorrelationError(f"correlation undefined: zero variance in {which}")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    return float(np.clip((da * db).sum() / (na * nb), -1.0, 1.0))


def _removal_drops(model, image: Image, mask: SegmentMask, subsets) -> np.ndarray:
    full = model.logits(image.pixels[None])[0, model.target]
    batch = np.stack([
        np.where(np.isin(mask.labels, s)[..., None], 0, image.pixels).astype(image.pixels.dtype)
        for s in subsets
    ])
    return full - model.logits(batch)[:, model.target]


def _sample_rngs(seed: int, samples: int):
    # one child stream per sample: subset i depends on (seed, i) only
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(samples)]


def removal_pairs(model, image, mask, scores, sizes, seed=0):
    """(prediction drops, summed scores, subsets) for random subsets of the given sizes."""
    vec = _score_vector(scores, mask.k)
    subsets = [rng.choice(mask.k, size=n, replace=False)
               for rng, n in zip(_sample_rngs(seed, len(sizes)), sizes)]
    drops = _removal_drops(model, image, mask, subsets)
    # sorted so equal subsets give bit-identical sums
    sums = np.array([vec[np.sort(s)].sum() for s in subsets])
    return drops, sums, subsets


def sensitivity_n(model, image: Image, mask: SegmentMask, scores, n: int, samples: int = 100,
                  seed: int = 0) -> float:
    """Pearson correlation of logit drops and score sums over random size-n removals."""
    if not 1 <= n <= mask.k:
        raise ValueError(f"n={n} outside [1, {mask.k}]")
    if samples < 2:
        raise ValueError("samples must be >= 2")
    drops, sums, _ = removal_pairs(model, image, mask, scores, [n] * samples, seed)
    return pearson(drops, sums)


def sensitivity_sweep(model, image, mask, scores, samples=100, seed=0, ns=None, step=3, max_n=50):
    """Sensitivity-n for n = step, 2*step, ... up to min(max_n, k); undefined entries are None."""
    if ns is None:
        ns = range(step, min(max_n, mask.k) + 1, step)
    out = {}
    for n in ns:
        try:
            out[int(n)] = sensitivity_n(model, image, mask, scores, n, samples, seed)
        except UndefinedCorrelationError:
            out[int(n)] = None
    return out


def faithfulness(model, image: Image, mask: SegmentMask, scores, samples: int = 100,
                 seed: int = 0) -> float:
    """Like sensitivity_n, pooling random subset sizes drawn uniformly from [1, k]."""
    if samples < 2:
        raise ValueError("samples must be >= 2")
    size_rng = np.random.default_rng([seed, 1])
    sizes = size_rng.integers(1, mask.k + 1, size=samples)
    drops, sums, _ = removal_pairs(model, image, mask, scores, sizes, seed)
    return pearson(drops, sums)


def ssc(model, image: Image, mask: SegmentMask, ranked) -> int:
    """Fewest top concepts that, alone on a zero canvas, are classified as target (k+1 if none)."""
    canv = _step_canvases(image, mask, _order(ranked, mask.k), "insertion")
    hits = np.flatnonzero(model.logits(canv).argmax(axis=1) == model.target)
    return int(hits[0]) if len(hits) else mask.k + 1


def sdc(model, image: Image, mask: SegmentMask, ranked) -> Optional[int]:
    """Fewest top concepts whose deletion flips the prediction away from target.

    ``None`` when the intact image is already misclassified; ``k+1`` if no
    prefix flips it.
    """
    canv = _step_canvases(image, mask, _order(ranked, mask.k), "deletion")
    pred = model.logits(canv).argmax(axis=1)
    if pred[0] != model.target:
        return None
    flips = np.flatnonzero(pred != model.target)
    return int(flips[0]) if len(flips) else mask.k + 1


def concept_set_sizes(model, items: Sequence[RankedItem]) -> dict:
    """Dataset-level SSC/SDC: averages exclude sentinels and undefined cases, which are counted."""
    rows = []
    for it in items:
        s = ssc(model, it.image, it.mask, it.ranked)
        d = sdc(model, it.image, it.mask, it.ranked)
        rows.append({"image_id": it.image.id, "k": it.mask.k, "ssc": s, "sdc": d})
    ssc_ok = [r["ssc"] for r in rows if r["ssc"] <= r["k"]]
    sdc_ok = [r["sdc"] for r in rows if r["sdc"] is not None and r["sdc"] <= r["k"]]
    n = len(rows)
    return {
        "ssc_mean": float(np.mean(ssc_ok)) if ssc_ok else None,
        "sdc_mean": float(np.mean(sdc_ok)) if sdc_ok else None,
        "ssc_sentinel_count": sum(r["ssc"] > r["k"] for r in rows),
        "sdc_sentinel_count": sum(r["sdc"] is not None and r["sdc"] > r["k"] for r in rows),
        "sdc_undefined_count": sum(r["sdc"] is None for r in rows),
        "ssc_sentinel_rate": sum(r["ssc"] > r["k"] for r in rows) / n if n else None,
        "sdc_sentinel_rate": sum(r["sdc"] is not None and r["sdc"] > r["k"] for r in rows) / n if n else None,
        "n": n,
        "rows": rows,
    }


def completeness(model, items: Sequence[RankedItem], size: int) -> float:
    """Accuracy with only the top-``size`` concepts kept, over intact-image accuracy."""
    if size < 0:
        raise ValueError("size must be >= 0")
    if not items:
        raise ValueError("completeness needs at least one image")
    intact = model.logits(np.stack([it.image.pixels for it in items]))
    base = np.array([b == it.is_target for b, it in zip(intact.argmax(axis=1) == model.target, items)])
    if not base.any():
        raise UndefinedRatioError("original accuracy is 0; completeness undefined")
    reduced_correct = base.copy()
    partial = [i for i, it in enumerate(items) if size < it.mask.k]
    if partial:
        canv = np.stack([
            _step_canvases(items[i].image, items[i].mask, _order(items[i].ranked, items[i].mask.k),
                           "insertion")[size]
            for i in partial
        ])
        pred_t = model.logits(canv).argmax(axis=1) == model.target
        for j, i in enumerate(partial):
            reduced_correct[i] = pred_t[j] == items[i].is_target
    return float(reduced_correct.mean() / base.mean())


def friedman_test(accuracy_matrix, alpha: float = 0.05, treatments: Optional[Sequence] = None) -> RankingResult:
    """Friedman chi-square over a blocks x treatments matrix (higher value = better = higher rank)."""
    a = np.asarray(accuracy_matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2 or a.shape[1] < 2:
        raise ValueError(f"need at least 2 blocks and 2 treatments, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("accuracy matrix contains non-finite values")
    n, t = a.shape
    names = list(treatments) if treatments is not None else list(range(t))
    if len(names) != t:
        raise ValueError("treatment names do not match matrix columns")
    ranks = stats.rankdata(a, axis=1)
    mean_ranks = ranks.mean(axis=0)
    statistic = 12.0 * n / (t * (t + 1)) * float(np.sum(mean_ranks ** 2)) - 3.0 * n * (t + 1)
    statistic = max(statistic, 0.0)
    p_value = float(stats.chi2.sf(statistic, t - 1))
    return RankingResult({nm: float(r) for nm, r in zip(names, mean_ranks)},
                         float(statistic), p_value, float(alpha), bool(p_value < alpha))


def pixelmap_to_concept_scores(pixel_map, mask: SegmentMask, parent_id: str = "") -> list[ConceptScore]:
    """Concept score = sum of absolute pixel attributions inside the segment."""
    pm = np.asarray(pixel_map, dtype=np.float64)
    if pm.ndim == 3:
        pm = np.abs(pm).sum(axis=2)
    if pm.shape != mask.labels.shape:
        raise ValueError(f"pixel map {pm.shape} does not match mask {mask.labels.shape}")
    sums = np.bincount(mask.labels.ravel(), weights=np.abs(pm).ravel(), minlength=mask.k)
    return [ConceptScore(j, float(v), parent_id) for j, v in enumerate(sums)]


def evaluate_image(model, item: RankedItem, metrics: Sequence[str], samples: int = 100,
                   seed: int = 0) -> dict:
    """Per-image metric row for the names in ``metrics``."""
    img, mask, ranked = item.image, item.mask, item.ranked
    s = derive_seed(seed, img.id)
    row = {"image_id": img.id, "k": mask.k}
    if "insertion" in metrics:
        row["insertion_auc"] = auc(insertion_deletion_curve(model, img, mask, ranked, "insertion"))
    if "deletion" in metrics:
        row["deletion_auc"] = auc(insertion_deletion_curve(model, img, mask, ranked, "deletion"))
    if "sensn" in metrics:
        row["sensitivity"] = {str(n): v for n, v in
                              sensitivity_sweep(model, img, mask, ranked, samples, s).items()}
    if "faith" in metrics:
        try:
            row["faithfulness"] = faithfulness(model, img, mask, ranked, samples, s)
        except UndefinedCorrelationError:
            row["faithfulness"] = None
    if "ssc" in metrics:
        row["ssc"] = ssc(model, img, mask, ranked)
    if "sdc" in metrics:
        row["sdc"] = sdc(model, img, mask, ranked)
    return row


def _nanmean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_dataset(model, items: Sequence[RankedItem], metrics: Sequence[str], samples: int = 100,
                     seed: int = 0, completeness_sizes: Sequence[int] = (1, 3)):
    """Per-image rows plus an aggregated :class:`MetricReport`."""
    rows = [evaluate_image(model, it, metrics, samples, seed) for it in items]
    rep = MetricReport(seed=seed, counts={"images": len(rows)})
    if "insertion" in metrics:
        rep.insertion_auc = _nanmean(r["insertion_auc"] for r in rows)
    if "deletion" in metrics:
        rep.deletion_auc = _nanmean(r["deletion_auc"] for r in rows)
    if "sensn" in metrics:
        keys = sorted({int(n) for r in rows for n in r["sensitivity"]})
        rep.sensitivity = {str(n): _nanmean(r["sensitivity"].get(str(n)) for r in rows) for n in keys}
    if "faith" in metrics:
        rep.faithfulness = _nanmean(r["faithfulness"] for r in rows)
        rep.counts["faithfulness_undefined"] = sum(r["faithfulness"] is None for r in rows)
    if "ssc" in metrics:
        ok = [r["ssc"] for r in rows if r["ssc"] <= r["k"]]
        rep.ssc = _nanmean(ok)
        rep.counts["ssc_sentinel"] = len(rows) - len(ok)
    if "sdc" in metrics:
        ok = [r["sdc"] for r in rows if r["sdc"] is not None and r["sdc"] <= r["k"]]
        rep.sdc = _nanmean(ok)
        rep.counts["sdc_undefined"] = sum(r["sdc"] is None for r in rows)
        rep.counts["sdc_sentinel"] = sum(r["sdc"] is not None and r["sdc"] > r["k"] for r in rows)
    if "completeness" in metrics:
        rep.completeness = {}
        for size in completeness_sizes:
            try:
                rep.completeness[str(size)] = completeness(model, items, size)
            except UndefinedRatioError:
                rep.completeness[str(size)] = None
    return rows, rep
