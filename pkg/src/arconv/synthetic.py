"""Seeded synthetic fundus-like images for smoke tests and learnability checks."""
import numpy as np

from ._validation import check_random_state


def fundus_disc(rng, size=224, radius=None, center=None):
    """One orange-ish disc on black with radial falloff; returns ``(image, (cy, cx, r))``."""
    r = radius if radius is not None else rng.uniform(0.40, 0.46) * size
    if center is None:
        cy, cx = size / 2 + rng.uniform(-0.04, 0.04, 2) * size
    else:
        cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = np.hypot(yy - cy, xx - cx) / r
    inside = d <= 1.0
    tint = np.array([0.62, 0.34, 0.16]) * rng.uniform(0.9, 1.1, 3)
    falloff = np.clip(1.0 - 0.35 * d ** 2, 0, 1)
    img = inside[..., None] * falloff[..., None] * tint
    return img, (cy, cx, r)


def blob_dataset(n=200, size=224, seed=0, amplitude=0.3, noise=0.02, dtype=np.float32):
    """Balanced two-class set: label 1 has a bright blob inside the disc, label 0 a dark one.

    Blob position, width, disc geometry and tint vary per image; the
    labels alternate and are then shuffled with the same generator.
    """
    rng = check_random_state(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    X = np.empty((n, size, size, 3), dtype=dtype)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(n):
        img, (cy, cx, r) = fundus_disc(rng, size)
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0, 0.55) * r
        by, bx = cy + dist * np.sin(ang), cx + dist * np.cos(ang)
        sigma = rng.uniform(0.06, 0.10) * size
        blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma ** 2))
        sign = 1.0 if labels[i] == 1 else -1.0
        img = img + sign * amplitude * blob[..., None] * (img.sum(axis=-1, keepdims=True) > 0)
        img += rng.normal(0, noise, img.shape)
        X[i] = np.clip(img, 0, 1)
    return X, labels.astype(np.int64)
