"""
Superpixels as candidate concepts
=================================

Segment a synthetic image into superpixels and look at the zero-masked
images that become training samples and concept candidates.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from skimage.segmentation import mark_boundaries

from ucbs import extract_superpixel_images, slic_segment
from ucbs.synthetic import make_shapes

out = Path("demo_output")
out.mkdir(exist_ok=True)

# one disc-on-noise image and its planted object mask
(image, obj), = make_shapes(1, "disc", size=64, seed=3)

# k is a request; the realised count can be a little lower
mask = slic_segment(image, k=16)
print("requested 16 segments, got", mask.k)
print("segment sizes:", mask.sizes().tolist())

segments = extract_superpixel_images(image, mask)

# the zero-masked pieces add back up to the original, pixel for pixel
rebuilt = sum(s.pixels for s in segments)
print("exact reconstruction:", np.array_equal(rebuilt, image.pixels))

# the segment with the largest overlap with the disc
overlap = [np.sum(s.mask & obj) for s in segments]
best = int(np.argmax(overlap))
print("segment covering most of the disc:", best)

fig, axes = plt.subplots(1, 3, figsize=(9, 3))
axes[0].imshow(image.pixels)
axes[0].set_title("image")
axes[1].imshow(mark_boundaries(image.pixels, mask.labels))
axes[1].set_title(f"{mask.k} superpixels")
axes[2].imshow(segments[best].pixels)
axes[2].set_title(f"segment {best}, zero-masked")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "superpixels.png", dpi=100)
print("wrote", out / "superpixels.png")
