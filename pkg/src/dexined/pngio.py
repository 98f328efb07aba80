"""8-bit PNG reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png",)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def write_png(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError(f"expected uint8, got {arr.dtype}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed encoder settings and no metadata keep outputs byte-identical
    Image.fromarray(arr).save(path, format="PNG", compress_level=6, optimize=False)


def prob_to_uint8(p: np.ndarray) -> np.ndarray:
    """round(p * 255); evaluation divides by 255 again, so maps are quantized to 1/255."""
    return np.rint(np.clip(p, 0.0, 1.0) * 255.0).astype(np.uint8)


def edge_to_uint8(edge: np.ndarray) -> np.ndarray:
    return (np.asarray(edge) > 0).astype(np.uint8) * 255


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
