"""Auxiliary dataset assembly (originals + superpixels + out-of-distribution),
validation scenarios, and the JSON manifest format."""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatVersionError
from .segmentation import (
    Image,
    SegmentMask,
    SuperpixelImage,
    extract_superpixel_images,
    load_image,
    load_mask,
    resize_image,
    save_image,
    save_mask,
    slic_segment,
)

MANIFEST_FORMAT = "ucbs-aux-manifest"
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class ManifestChecksumWarning(UserWarning):
    pass


@dataclass(eq=False)
class AuxiliaryDataset:
    """Training data for one target class.

    Labels are implied by the part: originals and superpixel samples are 1,
    out-of-distribution samples are 0. ``masks`` maps parent image id to the
    segmentation that produced its superpixel samples.
    """

    target_class: str
    originals: list
    superpixel_samples: list
    ood_samples: list
    provenance: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)

    def parts(self):
        """``(name, images, label)`` for the three parts, in objective order."""
        return [
            ("originals", [im.pixels for im in self.originals], 1),
            ("superpixels", [sp.pixels for sp in self.superpixel_samples], 1),
            ("ood", [im.pixels for im in self.ood_samples], 0),
        ]

    def counts(self):
        return {"originals": len(self.originals),
                "superpixels": len(self.superpixel_samples),
                "ood": len(self.ood_samples)}


@dataclass(eq=False)
class ValidationScenario:
    kind: str
    positives: list
    negatives: list

    def __len__(self):
        return len(self.positives) + len(self.negatives)

    def images_and_labels(self):
        images = [im.pixels for im in self.positives] + [im.pixels for im in self.negatives]
        labels = np.array([1] * len(self.positives) + [0] * len(self.negatives), dtype=np.int64)
        return images, labels


def load_image_dir(directory, class_label=None, input_size: Optional[int] = None) -> list[Image]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    for p in paths:
        try:
            im = load_image(p, class_label=class_label)
        except OSError as exc:
            raise OSError(f"cannot read image {p}: {exc}") from exc
        images.append(resize_image(im, input_size) if input_size else im)
    return images


def load_split(data_root, class_name, split, input_size=None):
    """Images of ``data/<class>/<split>/``."""
    return load_image_dir(Path(data_root) / class_name / split, class_label=class_name,
                          input_size=input_size)


def build_auxiliary_dataset(target_images: Sequence[Image], other_class_images: Sequence[Image],
                            m: int, k: int, n_ood: int, seed: int, *, target_class=None,
                            compactness: float = 10.0, iterations: int = 10,
                            workers: int = 1) -> AuxiliaryDataset:
    """Assemble D = originals, D_S = segments of ``m`` random originals, D_out = ``n_ood`` negatives.

    All originals are kept in D, including the ``m`` that are also segmented.
    """
    if m < 1 or m > len(target_images):
        raise ValueError(f"m={m} but only {len(target_images)} target images are available")
    if n_ood < 1 or n_ood > len(other_class_images):
        raise ValueError(f"n_ood={n_ood} but only {len(other_class_images)} other-class images are available")
    if target_class is None:
        target_class = target_images[0].class_label
    for im in other_class_images:
        if target_class is not None and im.class_label == target_class:
            raise ValueError(f"out-of-distribution pool contains target-class image {im.id!r}")

    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(target_images), size=m, replace=False)
    ood_idx = rng.choice(len(other_class_images), size=n_ood, replace=False)

    to_segment = [target_images[i] for i in chosen]

    def _seg(im):
        return slic_segment(im, k, compactness=compactness, iterations=iterations, seed=seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            masks = list(pool.map(_seg, to_segment))
    else:
        masks = [_seg(im) for im in to_segment]

    superpixels = []
    mask_map = {}
    for im, mask in zip(to_segment, masks):
        mask_map[im.id] = mask
        superpixels.extend(extract_superpixel_images(im, mask))

    provenance = {
        "seed": int(seed), "m": int(m), "k": int(k), "n_ood": int(n_ood),
        "compactness": float(compactness), "iterations": int(iterations),
        "segmented_ids": [im.id for im in to_segment],
        "realized_k": [int(mk.k) for mk in masks],
    }
    return AuxiliaryDataset(
        target_class=target_class,
        originals=list(target_images),
        superpixel_samples=superpixels,
        ood_samples=[other_class_images[i] for i in ood_idx],
        provenance=provenance,
        masks=mask_map,
    )


def make_validation_scenarios(target_val: Sequence[Image], other_val: Sequence[Image],
                              n_neg: int = 1000, seed: int = 0):
    """Return ``(val_pure, val_equal, val_1000)``; the last holds ``n_neg`` negatives."""
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1: the third scenario needs negatives")
    if not target_val:
        raise ValueError("no target-class validation images")
    need = max(len(target_val), n_neg)
    if len(other_val) < need:
        raise ValueError(f"need {need} negative images, only {len(other_val)} available")
    rng = np.random.default_rng(seed)
    pos = list(target_val)
    eq = rng.choice(len(other_val), size=len(pos), replace=False)
    big = rng.choice(len(other_val), size=n_neg, replace=False)
    return (
        ValidationScenario("val_pure", pos, []),
        ValidationScenario("val_equal", pos, [other_val[i] for i in eq]),
        ValidationScenario("val_1000", pos, [other_val[i] for i in big]),
    )


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _entries_checksum(entries) -> str:
    blob = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _safe_name(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in s)


def save_manifest(dataset: AuxiliaryDataset, path):
    """Write ``dataset`` as JSON next to its masks (and any in-memory images)."""
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    mask_dir = root / f"{path.stem}_masks"
    img_dir = root / f"{path.stem}_images"

    def _image_entry(im: Image):
        if im.source_path and Path(im.source_path).exists():
            p = Path(im.source_path)
        else:
            img_dir.mkdir(exist_ok=True)
            p = img_dir / f"{_safe_name(im.id)}.png"
            save_image(im, p)
        return {"id": im.id, "class": im.class_label,
                "path": Path(os.path.relpath(p.resolve(), root.resolve())).as_posix(),
                "sha256": _sha256(p)}

    originals = [_image_entry(im) for im in dataset.originals]
    by_id = {e["id"]: e for e in originals}
    mask_paths = {}
    for pid, mask in dataset.masks.items():
        mask_dir.mkdir(exist_ok=True)
        mp = mask_dir / f"{_safe_name(pid)}.png"
        save_mask(mask, mp)
        mask_paths[pid] = {"path": Path(os.path.relpath(mp, root)).as_posix(), "sha256": _sha256(mp)}
    superpixels = []
    for sp in dataset.superpixel_samples:
        parent = by_id.get(sp.parent_id)
        if parent is None or sp.parent_id not in mask_paths:
            raise ValueError(f"superpixel sample references unknown parent {sp.parent_id!r}")
        superpixels.append({"parent": parent["path"], "parent_id": sp.parent_id,
                            "mask": mask_paths[sp.parent_id]["path"],
                            "mask_sha256": mask_paths[sp.parent_id]["sha256"],
                            "segment": int(sp.segment_index)})
    ood = [_image_entry(im) for im in dataset.ood_samples]
    entries = {"originals": originals, "superpixels": superpixels, "ood": ood}
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "target_class": dataset.target_class,
        "provenance": dataset.provenance,
        **entries,
        "entries_checksum": _entries_checksum(entries),
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_manifest(path) -> AuxiliaryDataset:
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        # JSONDecodeError.pos is a character index; report bytes
        offset = len(raw.decode("utf-8", errors="replace")[: exc.pos].encode())
        raise FormatVersionError(
            f"{path}: manifest v{MANIFEST_VERSION} is truncated or corrupt at byte {offset}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise FormatVersionError(f"{path}: not a {MANIFEST_FORMAT} file")
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatVersionError(
            f"{path}: manifest version {doc.get('version')} unsupported (expected {MANIFEST_VERSION})")

    root = path.parent
    entries = {key: doc.get(key, []) for key in ("originals", "superpixels", "ood")}
    if _entries_checksum(entries) != doc.get("entries_checksum"):
        warnings.warn(f"{path}: entry checksum mismatch; manifest was edited "
                      f"({', '.join(f'{k}={len(v)}' for k, v in entries.items())})",
                      ManifestChecksumWarning, stacklevel=2)

    def _load(entry):
        p = root / entry["path"]
        if not p.exists():
            raise FileNotFoundError(f"manifest entry not found: {p}")
        if entry.get("sha256") and _sha256(p) != entry["sha256"]:
            warnings.warn(f"{p}: file checksum differs from manifest", ManifestChecksumWarning, stacklevel=3)
        return load_image(p, class_label=entry.get("class"), image_id=entry["id"])

    originals = [_load(e) for e in entries["originals"]]
    ood = [_load(e) for e in entries["ood"]]

    by_id = {im.id: im for im in originals}
    masks: dict[str, SegmentMask] = {}
    cache: dict[str, list[SuperpixelImage]] = {}
    superpixels = []
    for e in entries["superpixels"]:
        pid = e["parent_id"]
        if pid not in cache:
            parent = by_id.get(pid)
            if parent is None:
                parent = load_image(root / e["parent"], image_id=pid,
                                    class_label=doc.get("target_class"))
            masks[pid] = load_mask(root / e["mask"])
            cache[pid] = extract_superpixel_images(parent, masks[pid])
        superpixels.append(cache[pid][e["segment"]])

    return AuxiliaryDataset(
        target_class=doc.get("target_class"),
        originals=originals,
        superpixel_samples=superpixels,
        ood_samples=ood,
        provenance=doc.get("provenance", {}),
        masks=masks,
    )
