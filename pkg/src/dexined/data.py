"""Dataset indexing and the split / rotate / flip / gamma augmentation recipe."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .model import ConfigError
from .pngio import edge_to_uint8, read_gray, read_rgb, write_png

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MIN_SIDE = 16


class DataError(ValueError):
    pass


class AugmentationError(DataError):
    """A transform would produce an unusable (degenerate) output."""


# ---------------------------------------------------------------------------
# index

@dataclass
class DatasetIndex:
    root: Path
    split: str
    pairs: list  # (image path, edge map path)
    sizes: list  # (height, width)

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def scan(cls, root, split: str = "train") -> "DatasetIndex":
        root = Path(root)
        img_dir, gt_dir = root / "imgs" / split, root / "edge_maps" / split
        for d in (img_dir, gt_dir):
            if not d.is_dir():
                raise FileNotFoundError(f"missing directory: {d}")
        images = {p.stem: p for p in sorted(img_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
        edges = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.suffix.lower() == ".png"}
        problems = [f"no edge map for image {s!r}" for s in sorted(set(images) - set(edges))]
        problems += [f"no image for edge map {s!r}" for s in sorted(set(edges) - set(images))]
        pairs, sizes = [], []
        for stem in sorted(set(images) & set(edges)):
            ih, iw = read_gray(images[stem]).shape
            eh, ew = read_gray(edges[stem]).shape
            if (ih, iw) != (eh, ew):
                problems.append(f"{stem}: image {iw}x{ih} but edge map {ew}x{eh}")
                continue
            pairs.append((images[stem], edges[stem]))
            sizes.append((ih, iw))
        if problems:
            raise DataError("; ".join(problems))
        return cls(root, split, pairs, sizes)

    def load(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        img_path, gt_path = self.pairs[i]
        return read_rgb(img_path), load_edge_map(gt_path)


def load_edge_map(path) -> np.ndarray:
    """8-bit map (255 = edge) -> {0, 1} uint8, thresholded at one half."""
    return (read_gray(path) >= 128).astype(np.uint8)


def load_training_set(root, split: str = "train"):
    from .training import EdgeDataset

    index = DatasetIndex.scan(root, split)
    pairs = [index.load(i) for i in range(len(index))]
    return EdgeDataset([p[0] for p in pairs], [p[1] for p in pairs], [p[0].stem for p in index.pairs])


# ---------------------------------------------------------------------------
# transforms

def split_half_width(image: np.ndarray, gt: np.ndarray):
    """Left and right halves; with odd width the left half keeps the extra column."""
    cut = (image.shape[1] + 1) // 2
    return (image[:, :cut].copy(), gt[:, :cut].copy()), (image[:, cut:].copy(), gt[:, cut:].copy())


def horizontal_flip(image: np.ndarray, gt: np.ndarray):
    return image[:, ::-1].copy(), gt[:, ::-1].copy()


def gamma_correct(image: np.ndarray, gamma: float) -> np.ndarray:
    """in ** gamma on [0, 1] intensities; uint8 input is rescaled and re-quantized."""
    if not gamma > 0:
        raise ConfigError("gamma must be > 0")
    if image.dtype == np.uint8:
        out = (image.astype(np.float64) / 255.0) ** gamma
        return np.rint(out * 255.0).astype(np.uint8)
    return np.power(image, gamma)


def inscribed_scale(h: int, w: int, angle_deg: float) -> float:
    """Largest k such that a k*w x k*h axis-aligned box fits inside the w x h box rotated by angle."""
    t = math.radians(angle_deg)
    c, s = abs(math.cos(t)), abs(math.sin(t))
    return min(w / (w * c + h * s), h / (w * s + h * c))


def rotate_inner_crop(image: np.ndarray, gt: np.ndarray, angle: float):
    """Rotate counter-clockwise about the centre and keep the inscribed same-aspect box.

    The image is sampled bilinearly, the edge map by nearest neighbour and then
    re-thresholded so it stays binary. 360 degrees is the identity.
    """
    a = float(angle) % 360.0
    if a == 0.0:
        return image.copy(), gt.copy()
    h, w = gt.shape
    k = inscribed_scale(h, w, a)
    oh, ow = int(math.floor(k * h + 1e-6)), int(math.floor(k * w + 1e-6))
    if min(oh, ow) < MIN_SIDE:
        raise AugmentationError(f"rotation by {angle} leaves a {ow}x{oh} crop")
    t = math.radians(a)
    c, s = math.cos(t), math.sin(t)
    dy, dx = np.meshgrid(np.arange(oh) - (oh - 1) / 2, np.arange(ow) - (ow - 1) / 2, indexing="ij")
    src_y = (h - 1) / 2 + dy * c + dx * s
    src_x = (w - 1) / 2 - dy * s + dx * c
    coords = np.stack([src_y, src_x])
    img = image.astype(np.float64)
    if img.ndim == 2:
        out = map_coordinates(img, coords, order=1, mode="nearest")
    else:
        out = np.stack([map_coordinates(img[..., ch], coords, order=1, mode="nearest")
                        for ch in range(img.shape[2])], axis=-1)
    if image.dtype == np.uint8:
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    edge = map_coordinates(gt.astype(np.float64), coords, order=0, mode="nearest")
    return out, (edge >= 0.5).astype(gt.dtype)


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class AugmentConfig:
    angles: tuple = tuple(24.0 * k for k in range(1, 16))
    gammas: tuple = (0.3030, 0.6060)
    split: bool = True
    rotate: bool = True
    flip: bool = True
    gamma: bool = True
    seed: int = 0  # the recipe is deterministic; kept so runs echo a complete config

    def __post_init__(self):
        self.angles = tuple(float(a) for a in self.angles)
        self.gammas = tuple(float(g) for g in self.gammas)
        if any(not 0 < a <= 360 for a in self.angles):
            raise ConfigError("angles must lie in (0, 360]")
        if any(not g > 0 for g in self.gammas):
            raise ConfigError("gammas must be > 0")

    def expected_count(self) -> int:
        """Outputs per source: halves x (1 + angles) x flips x (1 + gammas)."""
        n = 2 if self.split else 1
        n *= 1 + len(self.angles) if self.rotate else 1
        n *= 2 if self.flip else 1
        n *= 1 + len(self.gammas) if self.gamma else 1
        return n


@dataclass
class AugmentResult:
    records: list
    skipped: list = field(default_factory=list)
    manifest_path: Path | None = None

    def __len__(self):
        return len(self.records)


def _variants(image, gt, stem, cfg: AugmentConfig):
    """Yield (name, transform chain, image, gt) for one source in a fixed order."""
    halves = [("hf", (image, gt))]
    if cfg.split:
        left, right = split_half_width(image, gt)
        halves = [("h0", left), ("h1", right)]
    angles = [0.0] + (list(cfg.angles) if cfg.rotate else [])
    gammas = [None] + (list(cfg.gammas) if cfg.gamma else [])
    flips = [False, True] if cfg.flip else [False]
    for htag, (him, hgt) in halves:
        for a in angles:
            try:
                rim, rgt = rotate_inner_crop(him, hgt, a) if a else (him, hgt)
            except AugmentationError as exc:
                yield None, [f"split:{htag}", f"rotate:{a:g}"], str(exc), None
                continue
            for fl in flips:
                fim, fgt = horizontal_flip(rim, rgt) if fl else (rim, rgt)
                for g in gammas:
                    gim = gamma_correct(fim, g) if g is not None else fim
                    name = f"{stem}_{htag}_r{int(round(a)):03d}_f{int(fl)}_g{'id' if g is None else f'{g:.4f}'}"
                    chain = [f"split:{htag}", f"rotate:{a:g}", f"flip:{int(fl)}",
                             f"gamma:{'1' if g is None else f'{g:.4f}'}"]
                    yield name, chain, gim, fgt


def augment_dataset(index: DatasetIndex, out_dir, cfg: AugmentConfig | None = None) -> AugmentResult:
    """Write every augmented pair under ``out_dir`` mirroring the input layout, plus ``manifest.json``."""
    cfg = cfg or AugmentConfig()
    out = Path(out_dir)
    img_dir, gt_dir = out / "imgs" / index.split, out / "edge_maps" / index.split
    img_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    records, skipped = [], []
    for i, (img_path, _) in enumerate(index.pairs):
        image, gt = index.load(i)
        for name, chain, im, edge in _variants(image, gt, img_path.stem, cfg):
            if name is None:
                log.warning("skipping %s %s: %s", img_path.name, chain, im)
                skipped.append({"source": img_path.name, "transforms": chain, "reason": im})
                continue
            write_png(img_dir / f"{name}.png", im)
            write_png(gt_dir / f"{name}.png", edge_to_uint8(edge))
            records.append({"source": img_path.name, "transforms": chain,
                            "image": f"imgs/{index.split}/{name}.png",
                            "edge_map": f"edge_maps/{index.split}/{name}.png",
                            "height": int(edge.shape[0]), "width": int(edge.shape[1])})
    manifest = {"config": asdict(cfg), "split": index.split, "count": len(records),
                "per_source": cfg.expected_count(), "pairs": records, "skipped": skipped}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return AugmentResult(records, skipped, path)
