"""Superpixel segmentation (SLIC) and zero-masked per-segment images."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from skimage.color import rgb2lab

from .errors import FormatVersionError, InvalidInputError

MASK_SIDECAR_VERSION = 1
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(eq=False)
class Image:
    """An H x W x C float image with values in [0, 1]."""

    pixels: np.ndarray
    id: str
    source_path: Optional[str] = None
    class_label: Optional[str] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image {self.id!r}: expected H x W x C with C in {{1, 3}}, got {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError(f"image {self.id!r}: must be at least 8 x 8, got {px.shape[:2]}")
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float32)
        self.pixels = px

    @property
    def shape(self):
        return self.pixels.shape

    def validate(self):
        if not np.all(np.isfinite(self.pixels)):
            raise InvalidInputError(f"image {self.id!r} contains non-finite pixels")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise InvalidInputError(f"image {self.id!r} has pixels outside [0, 1]")


@dataclass(eq=False)
class SegmentMask:
    """Per-pixel segment labels in ``[0, k)``; every label occurs."""

    labels: np.ndarray
    k: int
    params: dict = field(default_factory=dict)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.k)


@dataclass(eq=False)
class SuperpixelImage:
    pixels: np.ndarray
    segment_index: int
    parent_id: str
    mask: np.ndarray


def load_image(path, class_label=None, image_id=None) -> Image:
    """Read a PNG/JPEG file as a float32 RGB (or gray) image in [0, 1]."""
    path = Path(path)
    with PILImage.open(path) as im:
        if im.mode in ("L", "I;16", "I", "F"):
            arr = np.asarray(im.convert("L"), dtype=np.float32)[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return Image(arr / np.float32(255.0), id=image_id or path.stem,
                 source_path=str(path), class_label=class_label)


def save_image(image: Image, path):
    px = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    if px.shape[2] == 1:
        px = px[:, :, 0]
    PILImage.fromarray(px).save(path)


def resize_image(image: Image, size: int) -> Image:
    """Bilinear resize to ``size`` x ``size`` (half-pixel centers, no antialiasing)."""
    import torch
    import torch.nn.functional as F

    if image.shape[0] == size and image.shape[1] == size:
        return image
    t = torch.from_numpy(np.ascontiguousarray(image.pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    px = out[0].permute(1, 2, 0).numpy().clip(0.0, 1.0)
    return Image(px, id=image.id, source_path=image.source_path, class_label=image.class_label)


def resize_mask(mask: SegmentMask, size: int) -> SegmentMask:
    """Nearest-neighbour resize; labels lost by the resize are renumbered away."""
    h, w = mask.labels.shape
    if h == size and w == size:
        return mask
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    labels = mask.labels[np.ix_(rows, cols)]
    labels = _renumber(labels)
    return SegmentMask(labels, int(labels.max()) + 1, dict(mask.params))


def _features(image: Image) -> np.ndarray:
    px = image.pixels.astype(np.float64)
    if px.shape[2] == 3:
        return rgb2lab(px)
    # gray images live on the L axis of Lab so compactness means the same thing
    return px * 100.0


def _grid_shape(h: int, w: int, k: int):
    """Seed grid with between 0.75k and k cells, cells as square as possible."""
    best = None
    for ny in range(1, min(k, h) + 1):
        nx = min(k // ny, w)
        if nx < 1 or ny * nx < 0.75 * k:
            continue
        distortion = abs(math.log((h / ny) / (w / nx)))
        key = (round(distortion, 12), -ny * nx, ny)
        if best is None or key < best[0]:
            best = (key, ny, nx)
    if best is None:
        # tiny images: fall back to one centre per row/column pair available
        ny = min(h, k)
        return ny, max(1, min(w, k // ny))
    return best[1], best[2]


def _renumber(labels: np.ndarray) -> np.ndarray:
    _, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(labels.shape).astype(np.int32)


def _enforce_connectivity(labels: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Keep each label's largest 4-connected piece; merge orphans into a neighbour.

    An orphan component joins the adjacent segment it shares the longest border
    with (ties: closest mean colour, then lowest label).
    """
    out = labels.copy()
    orphan = np.zeros(labels.shape, dtype=bool)
    for lab, sl in enumerate(ndimage.find_objects(labels + 1)):
        if sl is None:
            continue
        region = labels[sl] == lab
        comp, n = ndimage.label(region, structure=_CROSS)
        if n > 1:
            sizes = np.bincount(comp.ravel())[1:]
            keep = int(np.argmax(sizes)) + 1
            orphan[sl] |= region & (comp != keep)
    if not orphan.any():
        return out
    out[orphan] = -1
    comp, n = ndimage.label(orphan, structure=_CROSS)
    for ci, sl in enumerate(ndimage.find_objects(comp), start=1):
        # grow the box by one pixel so the neighbour ring is visible
        sl = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in sl)
        piece = comp[sl] == ci
        ring = ndimage.binary_dilation(piece, structure=_CROSS) & ~piece
        neigh = out[sl][ring]
        neigh = neigh[neigh >= 0]
        cands, counts = np.unique(neigh, return_counts=True)
        best = cands[counts == counts.max()]
        if len(best) > 1:
            mean = feats[sl][piece].mean(axis=0)
            dists = [np.linalg.norm(feats[out == b].mean(axis=0) - mean) for b in best]
            best = best[[int(np.argmin(dists))]]
        out[sl][piece] = best[0]
    return out


def slic_segment(image: Image, k: int, compactness: float = 10.0, iterations: int = 10,
                 seed: int = 0) -> SegmentMask:
    """Partition ``image`` into roughly ``k`` compact, 4-connected superpixels.

    Grid-seeded SLIC in Lab space followed by connectivity enforcement. The
    algorithm itself is deterministic; ``seed`` is recorded with the mask and
    only breaks exact ties between equidistant centres.
    """
    image.validate()
    h, w = image.shape[:2]
    if k < 1 or k > h * w:
        raise ValueError(f"k={k} must be in [1, {h * w}] for a {h}x{w} image")
    if compactness <= 0 or iterations < 1:
        raise ValueError("compactness must be > 0 and iterations >= 1")

    feats = _features(image)
    ny, nx = _grid_shape(h, w, k)
    step_y, step_x = h / ny, w / nx
    cy = (np.arange(ny) + 0.5) * step_y
    cx = (np.arange(nx) + 0.5) * step_x
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    pos = np.stack([gy.ravel(), gx.ravel()], axis=1)
    centers_f = feats[pos[:, 0].astype(int), pos[:, 1].astype(int)].copy()
    n_centers = len(pos)

    step = math.sqrt(h * w / n_centers)
    spatial_w = (compactness / step) ** 2
    rng = np.random.default_rng(seed)
    jitter = rng.random(n_centers) * 1e-9
    yy, xx = np.mgrid[0:h, 0:w]
    radius = int(math.ceil(step))

    labels = np.zeros((h, w), dtype=np.int32)
    for _ in range(iterations):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for c in range(n_centers):
            y0, y1 = max(int(pos[c, 0]) - radius, 0), min(int(pos[c, 0]) + radius + 1, h)
            x0, x1 = max(int(pos[c, 1]) - radius, 0), min(int(pos[c, 1]) + radius + 1, w)
            dc = ((feats[y0:y1, x0:x1] - centers_f[c]) ** 2).sum(axis=2)
            ds = (yy[y0:y1, x0:x1] - pos[c, 0]) ** 2 + (xx[y0:y1, x0:x1] - pos[c, 1]) ** 2
            d = dc + spatial_w * ds + jitter[c]
            win = best[y0:y1, x0:x1]
            upd = d < win
            win[upd] = d[upd]
            labels[y0:y1, x0:x1][upd] = c
        if (labels < 0).any():
            miss = labels < 0
            d2 = (yy[miss, None] - pos[None, :, 0]) ** 2 + (xx[miss, None] - pos[None, :, 1]) ** 2
            labels[miss] = np.argmin(d2, axis=1)
        counts = np.bincount(labels.ravel(), minlength=n_centers)
        live = counts > 0
        flat = labels.ravel()
        for d, coord in enumerate((yy, xx)):
            pos[live, d] = (np.bincount(flat, coord.ravel(), n_centers)[live] / counts[live])
        for ch in range(feats.shape[2]):
            centers_f[live, ch] = (np.bincount(flat, feats[:, :, ch].ravel(), n_centers)[live]
                                   / counts[live])

    labels = _enforce_connectivity(labels, feats)
    labels = _renumber(labels)
    params = {"k": int(k), "seed": int(seed), "compactness": float(compactness),
              "iterations": int(iterations)}
    return SegmentMask(labels, int(labels.max()) + 1, params)


def extract_superpixel_images(image: Image, mask: SegmentMask) -> list[SuperpixelImage]:
    """One zero-masked copy of ``image`` per segment, ordered by label."""
    if mask.labels.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.labels.shape} does not match image {image.shape[:2]}")
    out = []
    for j in range(mask.k):
        m = mask.labels == j
        px = np.where(m[:, :, None], image.pixels, 0).astype(image.pixels.dtype)
        out.append(SuperpixelImage(px, j, image.id, m))
    return out


def masked_image(pixels: np.ndarray, labels: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    """Copy of ``pixels`` where only segments in ``keep`` survive."""
    m = np.isin(labels, np.asarray(keep, dtype=labels.dtype))
    return np.where(m[:, :, None], pixels, 0).astype(pixels.dtype)


def save_mask(mask: SegmentMask, path):
    """Write labels as a 16-bit PNG plus a ``.json`` sidecar with the SLIC parameters."""
    path = Path(path)
    if mask.k > 65535:
        raise ValueError("too many segments for a 16-bit mask")
    PILImage.fromarray(mask.labels.astype(np.uint16)).save(path)
    sidecar = {"version": MASK_SIDECAR_VERSION, "k": int(mask.k)}
    for key in ("seed", "compactness", "iterations"):
        if key in mask.params:
            sidecar[key] = mask.params[key]
    if "k" in mask.params:
        sidecar["requested_k"] = mask.params["k"]
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))


def load_mask(path) -> SegmentMask:
    path = Path(path)
    with PILImage.open(path) as im:
        labels = np.asarray(im, dtype=np.int32)
    sidecar_path = path.with_suffix(".json")
    params = {}
    k = int(labels.max()) + 1
    if sidecar_path.exists():
        side = json.loads(sidecar_path.read_text())
        if side.get("version") != MASK_SIDECAR_VERSION:
            raise FormatVersionError(f"{sidecar_path}: unsupported mask sidecar version {side.get('version')}")
        k = int(side["k"])
        params = {key: side[key] for key in ("seed", "compactness", "iterations") if key in side}
        if "requested_k" in side:
            params["k"] = side["requested_k"]
    return SegmentMask(labels, k, params)
