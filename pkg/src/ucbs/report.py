"""Misclassification analysis and static HTML reports."""

from __future__ import annotations

import base64
import html
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .concepts import GlobalExplanation, extract_local
from .segmentation import Image, SegmentMask, extract_superpixel_images


def outcome(predicted_target: bool, is_target: bool) -> str:
    if predicted_target:
        return "TP" if is_target else "FP"
    return "FN" if is_target else "TN"


def misclassification_report(model, image: Image, mask: SegmentMask, p: int = 3,
                             global_explanation: Optional[GlobalExplanation] = None,
                             is_target: Optional[bool] = None) -> dict:
    """Classify the surrogate's decision on ``image`` as TP/TN/FP/FN and list its top-p concepts.

    Ground truth comes from ``is_target`` or, failing that, from comparing
    ``image.class_label`` with ``model.target_class``. With a global
    explanation, each local concept is matched to its nearest global cluster
    centroid in embedding space.
    """
    if is_target is None:
        if image.class_label is None or model.target_class is None:
            raise ValueError(f"image {image.id!r} has no ground-truth label")
        is_target = image.class_label == model.target_class
    z = model.logits(image.pixels[None])[0]
    pred_target = int(np.argmax(z)) == model.target
    local = extract_local(model, image, mask, p)
    concepts = [{"segment_index": s.segment_index, "score": s.score} for s in local.top]
    if global_explanation is not None and global_explanation.clusters:
        segments = extract_superpixel_images(image, mask)
        emb = model.embeddings(np.stack([segments[s.segment_index].pixels for s in local.top]))
        cents = np.stack([np.asarray(c.centroid, dtype=np.float64) for c in global_explanation.clusters])
        d = np.linalg.norm(emb[:, None, :] - cents[None], axis=2)
        for row, dist in zip(concepts, d):
            j = int(np.argmin(dist))
            row["nearest_cluster"] = int(global_explanation.clusters[j].cluster_id)
            row["nearest_cluster_rank"] = j
            row["distance"] = float(dist[j])
    return {
        "image_id": image.id,
        "ground_truth": "target" if is_target else "non-target",
        "predicted": "target" if pred_target else "non-target",
        "outcome": outcome(pred_target, is_target),
        "misclassified": pred_target != is_target,
        "logits": [float(v) for v in z],
        "top_concepts": concepts,
    }


def _img_tag(path) -> str:
    data = base64.b64encode(Path(path).read_bytes()).decode()
    return f'<img src="data:image/png;base64,{data}" width="192">'


def write_html_report(records: Sequence[dict], heatmaps: dict, out_path, title="UCBS report"):
    """Static page: one row per record with its embedded heatmap."""
    rows = []
    for rec in records:
        concepts = ", ".join(
            f"#{c['segment_index']} ({c['score']:.3f}"
            + (f"; cluster {c['nearest_cluster']} d={c['distance']:.3f}" if "distance" in c else "")
            + ")"
            for c in rec["top_concepts"])
        img = _img_tag(heatmaps[rec["image_id"]]) if rec["image_id"] in heatmaps else ""
        rows.append(
            "<tr>" + "".join(f"<td>{html.escape(str(v))}</td>" for v in (
                rec["image_id"], rec["ground_truth"], rec["predicted"], rec["outcome"], concepts))
            + f"<td>{img}</td></tr>")
    page = (
        "<!DOCTYPE html><html><head><meta charset='utf-8'>"
        f"<title>{html.escape(title)}</title>"
        "<style>body{font-family:sans-serif}td,th{border:1px solid #ccc;padding:4px}"
        "table{border-collapse:collapse}</style></head><body>"
        f"<h1>{html.escape(title)}</h1><table><tr><th>image</th><th>truth</th><th>predicted</th>"
        "<th>outcome</th><th>top concepts</th><th>map</th></tr>"
        + "".join(rows) + "</table></body></html>\n")
    Path(out_path).write_text(page)
