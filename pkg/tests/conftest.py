import numpy as np
import pytest
import torch

from ucbs.segmentation import Image, SegmentMask

torch.set_num_threads(1)


class LinearMock:
    """Target logit = <weights, pixels>; the other logit is 0. Additive over segments."""

    target = 1
    target_class = "mock"

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)

    def logits(self, images):
        arr = np.asarray(images, dtype=np.float64)
        t = (arr * self.weights).reshape(len(arr), -1).sum(axis=1)
        return np.stack([np.zeros_like(t), t], axis=1)


class ConstantMock:
    target = 1
    target_class = "mock"

    def __init__(self, logits=(0.0, 1.0)):
        self.value = np.asarray(logits, dtype=np.float64)

    def logits(self, images):
        return np.tile(self.value, (len(images), 1))


def grid_mask(h, w, rows, cols):
    """Rectangular grid partition with rows*cols labels."""
    ry = np.minimum(np.arange(h) * rows // h, rows - 1)
    cx = np.minimum(np.arange(w) * cols // w, cols - 1)
    labels = (ry[:, None] * cols + cx[None, :]).astype(np.int32)
    return SegmentMask(labels, rows * cols)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def linear_setup(rng):
    """Linear mock on a constant-ones image over a 2x3 grid (k=6): segment weight = sum of its pixel weights."""
    h = w = 12
    mask = grid_mask(h, w, 2, 3)
    seg_w = rng.normal(0, 1, size=mask.k)
    pix_w = seg_w[mask.labels] / np.bincount(mask.labels.ravel())[mask.labels]
    weights = np.repeat(pix_w[:, :, None], 3, axis=2) / 3.0
    image = Image(np.ones((h, w, 3)), "ones")
    return LinearMock(weights), image, mask, seg_w
