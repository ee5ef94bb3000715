"""Synthetic shapes-on-noise images with ground-truth object masks.

Class ``disc`` carries a warm-coloured disc, class ``square`` a cool-coloured
square, both on mid-gray Gaussian noise. Pixels are quantised to 8 bits so
images survive a PNG round trip unchanged.
"""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .segmentation import Image, save_image

CLASSES = ("disc", "square")


def _background(rng, size):
    level = rng.uniform(0.3, 0.6)
    bg = level + rng.normal(0.0, 0.06, size=(size, size, 1))
    return np.repeat(bg, 3, axis=2)


def _draw(rng, size, shape):
    img = _background(rng, size)
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "disc":
        r = rng.uniform(0.125, 0.19) * size
        cy, cx = rng.uniform(r + 2, size - r - 2, size=2)
        obj = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        color = [rng.uniform(0.85, 1.0), rng.uniform(0.1, 0.35), rng.uniform(0.05, 0.25)]
    else:
        side = int(round(rng.uniform(0.22, 0.31) * size))
        y0, x0 = rng.integers(2, size - side - 2, size=2)
        obj = (yy >= y0) & (yy < y0 + side) & (xx >= x0) & (xx < x0 + side)
        color = [rng.uniform(0.05, 0.3), rng.uniform(0.2, 0.5), rng.uniform(0.75, 1.0)]
    shade = 1.0 + rng.normal(0.0, 0.03, size=(size, size, 1))
    img = np.where(obj[:, :, None], np.asarray(color) * shade, img)
    px = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return px.astype(np.float32) / np.float32(255.0), obj


def make_shapes(n, shape, size=64, seed=0, prefix=None):
    """``n`` images of one class as ``(Image, object_mask)`` pairs."""
    if shape not in CLASSES:
        raise ValueError(f"unknown shape {shape!r}; expected one of {CLASSES}")
    rng = np.random.default_rng([seed, CLASSES.index(shape)])
    prefix = prefix or shape
    out = []
    for i in range(n):
        px, obj = _draw(rng, size, shape)
        out.append((Image(px, id=f"{prefix}_{i:04d}", class_label=shape), obj))
    return out


def write_shapes_dataset(root, n_train=200, n_val=100, size=64, seed=0):
    """Write ``root/<class>/{train,val}/*.png`` plus ``<split>_objects/`` masks."""
    root = Path(root)
    for shape in CLASSES:
        for split, n, sub in (("train", n_train, 0), ("val", n_val, 1)):
            d = root / shape / split
            od = root / shape / f"{split}_objects"
            d.mkdir(parents=True, exist_ok=True)
            od.mkdir(parents=True, exist_ok=True)
            for im, obj in make_shapes(n, shape, size, seed=seed * 2 + sub, prefix=f"{shape}_{split}"):
                save_image(im, d / f"{im.id}.png")
                PILImage.fromarray(obj.astype(np.uint8) * 255).save(od / f"{im.id}.png")
    return root


def load_object_mask(path):
    with PILImage.open(path) as im:
        return np.asarray(im) > 127
