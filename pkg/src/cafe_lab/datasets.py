"""Synthetic desk-scale image data.

Smooth seeded images (one low-frequency Gaussian blob each) give the
total-variation regularizer something meaningful to act on; the class label
is the quadrant the blob center falls in, so labels carry real signal.
"""

import numpy as np

from .errors import ConfigError


def synthetic_blobs(n, height=8, width=8, n_classes=4, seed=0):
    """Returns (images, labels): images in [0, 1], labels in [0, n_classes)."""
    if n_classes not in (2, 4):
        raise ConfigError("synthetic blobs supports 2 or 4 classes")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    images = np.zeros((n, height, width))
    labels = np.zeros(n, dtype=int)
    for i in range(n):
        cy = rng.uniform(0.15, 0.85) * (height - 1)
        cx = rng.uniform(0.15, 0.85) * (width - 1)
        sig = rng.uniform(0.9, 1.8)
        amp = rng.uniform(0.7, 1.0)
        img = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        img += rng.uniform(0.0, 0.08)
        images[i] = np.clip(img, 0.0, 1.0)
        top = cy < (height - 1) / 2
        left = cx < (width - 1) / 2
        if n_classes == 2:
            labels[i] = 0 if left else 1
        else:
            labels[i] = (0 if top else 2) + (0 if left else 1)
    return images, labels
