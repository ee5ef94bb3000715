"""Concept scoring, local top-p extraction, global clustering, and choice of p."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from .segmentation import Image, SegmentMask, extract_superpixel_images, slic_segment


@dataclass(frozen=True)
class ConceptScore:
    segment_index: int
    score: float
    parent_id: str


@dataclass(eq=False)
class LocalExplanation:
    image_id: str
    mask: SegmentMask
    all_scores: list
    top: list

    @property
    def ranked(self):
        return rank_scores(self.all_scores)

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "k": int(self.mask.k),
            "scores": [float(s.score) for s in self.all_scores],
            "top": [int(s.segment_index) for s in self.top],
            "top_scores": [float(s.score) for s in self.top],
        }


@dataclass(frozen=True)
class ConceptMember:
    image_id: str
    segment_index: int
    score: float
    cost: float


@dataclass(eq=False)
class ConceptCluster:
    cluster_id: int
    centroid: np.ndarray
    members: list
    # set when loaded from a report that keeps only the representatives
    saved_population: Optional[int] = None
    saved_mean_cost: Optional[float] = None

    @property
    def population(self):
        return self.saved_population if self.saved_population is not None else len(self.members)

    @property
    def mean_cost(self):
        if self.saved_mean_cost is not None:
            return self.saved_mean_cost
        return float(np.mean([m.cost for m in self.members])) if self.members else math.inf


@dataclass(eq=False)
class GlobalExplanation:
    target_class: object
    clusters: list
    representatives: list
    n_candidates: int
    candidates: list = field(default_factory=list)

    def to_dict(self):
        return {
            "target_class": self.target_class,
            "n_candidates": self.n_candidates,
            "clusters": [
                {
                    "cluster_id": c.cluster_id,
                    "population": c.population,
                    "mean_cost": c.mean_cost,
                    "centroid": [float(v) for v in c.centroid],
                    "representatives": [
                        {"image_id": m.image_id, "segment_index": m.segment_index,
                         "score": m.score, "cost": m.cost}
                        for m in reps
                    ],
                }
                for c, reps in zip(self.clusters, self.representatives)
            ],
        }


def global_from_dict(doc) -> GlobalExplanation:
    """Inverse of :meth:`GlobalExplanation.to_dict`; member lists hold only the representatives."""
    clusters, reps = [], []
    for c in doc["clusters"]:
        members = [ConceptMember(m["image_id"], m["segment_index"], m["score"], m["cost"])
                   for m in c["representatives"]]
        clusters.append(ConceptCluster(c["cluster_id"], np.asarray(c["centroid"], dtype=np.float64),
                                       members, c["population"], c["mean_cost"]))
        reps.append(members)
    return GlobalExplanation(doc.get("target_class"), clusters, reps, doc.get("n_candidates", 0))


def rank_scores(scores: Sequence[ConceptScore]) -> list[ConceptScore]:
    """Descending by score; ties go to the lower segment index."""
    return sorted(scores, key=lambda s: (-s.score, s.segment_index))


def score_concepts(model, image: Image, mask: SegmentMask) -> list[ConceptScore]:
    """Raw target logit of every zero-masked segment, in label order."""
    segments = extract_superpixel_images(image, mask)
    z = model.logits(np.stack([s.pixels for s in segments]))[:, model.target]
    return [ConceptScore(s.segment_index, float(v), image.id) for s, v in zip(segments, z)]


def extract_local(model, image: Image, mask: SegmentMask, p: int = 3) -> LocalExplanation:
    if p < 1:
        raise ValueError("p must be >= 1")
    scores = score_concepts(model, image, mask)
    return LocalExplanation(image.id, mask, scores, rank_scores(scores)[: min(p, mask.k)])


def kmeans_plusplus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for i in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[i] = X[idx]
        d2 = np.minimum(d2, ((X - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(X, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4, init=None):
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments repeat or the relative inertia change drops below
    ``tol``. Empty clusters keep their previous centroid.
    Returns ``(centroids, labels, inertia)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if K < 1 or K > len(X):
        raise ValueError(f"K={K} clusters requested for {len(X)} points")
    centers = kmeans_plusplus(X, K, np.random.default_rng(seed)) if init is None else np.array(init, float)
    labels = None
    inertia = math.inf
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        new_inertia = float(d2[np.arange(len(X)), new_labels].sum())
        done = labels is not None and (
            np.array_equal(new_labels, labels)
            or abs(inertia - new_inertia) <= tol * max(inertia, 1e-300))
        labels, inertia = new_labels, new_inertia
        if done:
            break
        for j in range(K):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    else:
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(X)), labels].sum())
    return centers, labels, inertia


def extract_global(model, images: Sequence[Image], p: int = 3, K: int = 5, g: int = 3, r: int = 3,
                   seed: int = 0, masks: Optional[Sequence[SegmentMask]] = None, k: int = 50,
                   compactness: float = 10.0, iterations: int = 10) -> GlobalExplanation:
    """Cluster the embeddings of every image's top-p concepts; keep the g most populous clusters."""
    if not images:
        raise ValueError("extract_global needs at least one image")
    if g > K:
        raise ValueError(f"g={g} exceeds K={K}")
    if masks is None:
        masks = [slic_segment(im, k, compactness, iterations, seed) for im in images]
    cand_pixels, cand_refs = [], []
    for im, mk in zip(images, masks):
        local = extract_local(model, im, mk, p)
        segments = extract_superpixel_images(im, mk)
        for s in local.top:
            cand_pixels.append(segments[s.segment_index].pixels)
            cand_refs.append(s)
    if len(cand_refs) < K:
        raise ValueError(f"only {len(cand_refs)} candidate concepts for K={K} clusters")
    X = model.embeddings(np.stack(cand_pixels))
    centers, labels, _ = kmeans(X, K, seed=seed)
    costs = np.linalg.norm(X - centers[labels], axis=1)

    clusters = []
    for j in range(K):
        idx = np.flatnonzero(labels == j)
        members = [ConceptMember(cand_refs[i].parent_id, cand_refs[i].segment_index,
                                 cand_refs[i].score, float(costs[i])) for i in idx]
        clusters.append(ConceptCluster(j, centers[j], members))
    clusters.sort(key=lambda c: (-c.population, c.mean_cost, c.cluster_id))
    top = clusters[:g]
    reps = [sorted(c.members, key=lambda m: m.cost)[:r] for c in top]
    candidates = [ConceptMember(ref.parent_id, ref.segment_index, ref.score, float(cost))
                  for ref, cost in zip(cand_refs, costs)]
    return GlobalExplanation(model.target_class, top, reps, len(cand_refs), candidates)


def _ceil(x: float) -> int:
    # guard against float noise such as 3.0000000000000004
    return int(math.ceil(round(x, 9)))


def select_p_for_class(ssc: float, sdc: float) -> int:
    """Per-class number of concepts: ceil(max(SSC, SDC))."""
    return _ceil(max(ssc, sdc))


def select_p(ssc_per_class: Mapping, sdc_per_class: Mapping) -> int:
    """ceil(max(mean SSC, mean SDC)) over classes."""
    if not ssc_per_class or not sdc_per_class:
        raise ValueError("select_p needs non-empty SSC and SDC maps")
    if set(ssc_per_class) != set(sdc_per_class):
        raise ValueError("SSC and SDC maps must cover the same classes")
    return _ceil(max(float(np.mean(list(ssc_per_class.values()))),
                     float(np.mean(list(sdc_per_class.values())))))


def normalized_score_map(mask: SegmentMask, scores) -> np.ndarray:
    """Per-pixel min-max normalised segment score; constant scores map to 0.5."""
    vals = np.array([s.score if isinstance(s, ConceptScore) else s for s in scores], dtype=np.float64)
    if len(vals) != mask.k:
        raise ValueError(f"{len(vals)} scores for {mask.k} segments")
    lo, hi = vals.min(), vals.max()
    norm = np.full_like(vals, 0.5) if hi == lo else (vals - lo) / (hi - lo)
    return norm[mask.labels]


def render_score_map(image: Image, mask: SegmentMask, scores, out_path, opacity: float = 0.6,
                     cmap: str = "jet") -> np.ndarray:
    """Write a PNG heatmap of segment scores over the grayscale image; returns the fill map."""
    from matplotlib import colormaps

    if mask.labels.shape != image.shape[:2]:
        raise ValueError("mask and image dimensions differ")
    fill = normalized_score_map(mask, scores)
    px = image.pixels
    gray = px[:, :, 0] if px.shape[2] == 1 else px @ np.array([0.299, 0.587, 0.114], dtype=px.dtype)
    color = colormaps[cmap](fill)[:, :, :3]
    out = (1 - opacity) * gray[:, :, None] + opacity * color
    out = np.clip(np.rint(out * 255), 0, 255).astype(np.uint8)
    try:
        PILImage.fromarray(out).save(out_path, format="PNG")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write heatmap to {out_path}: {exc}") from exc
    return fill
