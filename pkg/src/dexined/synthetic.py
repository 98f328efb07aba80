"""Synthetic polygon scenes whose edge maps are exact label discontinuities."""

from __future__ import annotations

import numpy as np
from skimage.draw import polygon as fill_polygon


def label_boundaries(labels: np.ndarray) -> np.ndarray:
    """1 where a pixel's label differs from its right or lower neighbour."""
    edge = np.zeros(labels.shape, dtype=np.uint8)
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return edge


def _random_polygon(rng, h, w):
    n = int(rng.integers(3, 8))
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    radius = rng.uniform(0.12, 0.3) * min(h, w)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = radius * rng.uniform(0.6, 1.0, n)
    return cy + r * np.sin(angles), cx + r * np.cos(angles)


def polygon_scene(size: int | tuple[int, int] = 400, n_polygons: int = 4, seed: int = 0,
                  noise: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Returns (H x W x 3 uint8 image, H x W uint8 {0,1} edge map).

    Each polygon gets its own flat colour over a flat background; the edge map
    marks label changes, so it is exact rather than derived from intensities.
    """
    h, w = (size, size) if np.isscalar(size) else size
    rng = np.random.default_rng(seed)
    labels = np.zeros((h, w), dtype=np.int32)
    for k in range(1, n_polygons + 1):
        rr, cc = fill_polygon(*_random_polygon(rng, h, w), shape=(h, w))
        labels[rr, cc] = k
    colours = rng.integers(20, 236, size=(n_polygons + 1, 3))
    # keep neighbouring regions visibly distinct
    for k in range(1, n_polygons + 1):
        while np.abs(colours[k] - colours[:k]).sum(axis=1).min() < 90:
            colours[k] = rng.integers(20, 236, size=3)
    img = colours[labels].astype(np.float64)
    img += rng.normal(0, noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), label_boundaries(labels)


def polygon_dataset(n: int = 2, size: int = 400, seed: int = 0):
    """``n`` scenes with distinct seeds, as (images, edges)."""
    pairs = [polygon_scene(size, seed=seed * 1000 + i) for i in range(n)]
    return [p[0] for p in pairs], [p[1] for p in pairs]
