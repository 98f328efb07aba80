"""Boundary benchmark: thinning, tolerant pixel matching and ODS / OIS / AP."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

from .autodiff import ArgumentError, ShapeError
from .model import ConfigError
from .pngio import list_pngs, read_gray


class EvaluationError(ValueError):
    pass


@dataclass
class MatchConfig:
    max_dist: float = 0.0075     # fraction of the image diagonal
    n_thresholds: int = 99
    thin: bool = True

    def __post_init__(self):
        if not self.max_dist > 0:
            raise ConfigError("max_dist must be > 0")
        if self.n_thresholds < 1:
            raise ConfigError("n_thresholds must be >= 1")

    def thresholds(self) -> np.ndarray:
        t = self.n_thresholds
        return np.arange(1, t + 1) / (t + 1)

    def radius(self, shape) -> float:
        return self.max_dist * float(np.hypot(*shape[:2]))


def f_measure(p, r):
    """Harmonic mean of precision and recall, 0 when both are 0."""
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    s = p + r
    out = np.divide(2 * p * r, s, out=np.zeros(np.broadcast(p, r).shape), where=s > 0)
    return out if out.ndim else float(out)


def precision_recall(tp, fp, fn):
    """Empty denominators count as perfect (no predictions -> P = 1, no GT -> R = 1)."""
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    p = np.divide(tp, tp + fp, out=np.ones_like(tp), where=(tp + fp) > 0)
    r = np.divide(tp, tp + fn, out=np.ones_like(tp), where=(tp + fn) > 0)
    return p, r


# ---------------------------------------------------------------------------
# thinning

def _neighbours(m: np.ndarray):
    """P2..P9 clockwise from north, on a zero-padded copy."""
    p = np.pad(m, 1)
    h, w = m.shape
    at = lambda dy, dx: p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return [at(-1, 0), at(-1, 1), at(0, 1), at(1, 1), at(1, 0), at(1, -1), at(0, -1), at(-1, -1)]


def thin(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen skeletonization, iterated to a fixed point."""
    m = (np.asarray(mask) > 0).astype(np.uint8)
    if m.ndim != 2:
        raise ShapeError(f"thin expects a 2-D map, got {m.shape}")
    while True:
        changed = False
        for first in (True, False):
            n = _neighbours(m)
            p2, p3, p4, p5, p6, p7, p8, p9 = n
            b = sum(x.astype(np.int32) for x in n)
            seq = n + [p2]
            a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int32) for i in range(8))
            if first:
                c1, c2 = p2 * p4 * p6, p4 * p6 * p8
            else:
                c1, c2 = p2 * p4 * p8, p2 * p6 * p8
            kill = (m == 1) & (b >= 2) & (b <= 6) & (a == 1) & (c1 == 0) & (c2 == 0)
            if kill.any():
                m = m & ~kill.astype(np.uint8)
                changed = True
        if not changed:
            return m


# ---------------------------------------------------------------------------
# matching

@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int


def match_counts(pred_xy: np.ndarray, gt_xy: np.ndarray, radius: float) -> int:
    """Maximum number of disjoint (pred, gt) pairs within ``radius`` (Hopcroft-Karp)."""
    if len(pred_xy) == 0 or len(gt_xy) == 0:
        return 0
    tree = cKDTree(gt_xy)
    nbrs = tree.query_ball_point(pred_xy, r=radius)
    lens = np.fromiter((len(x) for x in nbrs), dtype=np.int64, count=len(nbrs))
    if lens.sum() == 0:
        return 0
    indptr = np.concatenate([[0], np.cumsum(lens)])
    indices = np.fromiter((j for row in nbrs for j in row), dtype=np.int64, count=int(lens.sum()))
    graph = csr_matrix((np.ones(len(indices), dtype=np.int8), indices, indptr), shape=(len(pred_xy), len(gt_xy)))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int(np.count_nonzero(match >= 0))


def match_edges(pred: np.ndarray, gt: np.ndarray, cfg: MatchConfig | None = None, radius: float | None = None) -> MatchResult:
    """One-to-one matching of edge pixels within ``max_dist * diagonal``.

    TP counts matched predicted pixels; unmatched predictions are FP and
    unmatched GT pixels FN. ``radius`` overrides the config, in pixels.
    """
    cfg = cfg or MatchConfig()
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    r = cfg.radius(gt.shape) if radius is None else radius
    pxy = np.argwhere(pred > 0).astype(np.float64)
    gxy = np.argwhere(gt > 0).astype(np.float64)
    tp = match_counts(pxy, gxy, r)
    return MatchResult(tp, len(pxy) - tp, len(gxy) - tp)


# ---------------------------------------------------------------------------
# dataset scoring

@dataclass
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f: float


@dataclass
class EvalSummary:
    ods: float
    ods_threshold: float
    ois: float
    ap: float
    curve: list = field(default_factory=list)
    per_image: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"ODS {self.ods:.3f} OIS {self.ois:.3f} AP {self.ap:.3f}"


def image_counts(prob: np.ndarray, gt: np.ndarray, cfg: MatchConfig) -> np.ndarray:
    """T x 3 array of (tp, fp, fn), one row per threshold."""
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    if prob.shape != gt.shape:
        raise ShapeError(f"prediction {prob.shape} and ground truth {gt.shape} differ")
    if not np.all((prob >= 0) & (prob <= 1)):
        raise ArgumentError("prediction values must lie in [0, 1]")
    if cfg.thin:
        gt = thin(gt)  # a one-pixel annotation is a fixed point; thicker ones get the same skeleton as a copy would
    r = cfg.radius(gt.shape)
    gxy = np.argwhere(gt).astype(np.float64)
    out = np.zeros((cfg.n_thresholds, 3), dtype=np.int64)
    for k, t in enumerate(cfg.thresholds()):
        b = prob >= t
        if cfg.thin:
            b = thin(b)
        pxy = np.argwhere(b).astype(np.float64)
        tp = match_counts(pxy, gxy, r)
        out[k] = tp, len(pxy) - tp, len(gxy) - tp
    return out


def _f_counts(tp, fp, fn):
    return f_measure(*precision_recall(tp, fp, fn))


def best_combined_thresholds(counts: np.ndarray, start: float = 0.0) -> tuple[float, np.ndarray]:
    """Per-image threshold indices maximizing F of the summed counts.

    F = 2 TP / (2 TP + FP + FN) is a ratio of sums, so Dinkelbach's method
    solves it exactly: for fixed lambda each image independently maximizes
    2 TP - lambda (2 TP + FP + FN), and lambda rises until no choice beats it.
    """
    tp, fp, fn = counts[..., 0].astype(np.float64), counts[..., 1].astype(np.float64), counts[..., 2].astype(np.float64)
    num = 2 * tp
    den = 2 * tp + fp + fn
    empty = den == 0
    if np.all(empty.any(axis=1)):
        # every image can be made count-free, which scores F = 1
        return 1.0, np.argmax(empty, axis=1)
    lam = start
    choice = np.zeros(len(counts), dtype=np.int64)
    for _ in range(1000):
        choice = np.argmax(num - lam * den, axis=1)
        rows = np.arange(len(counts))
        n, d = num[rows, choice].sum(), den[rows, choice].sum()
        value = n / d if d > 0 else 1.0
        if value <= lam:
            break
        lam = value
    return lam, choice


def average_precision(precision: np.ndarray, recall: np.ndarray) -> float:
    """Step integral over recall in [0, 1] of the monotone envelope of precision."""
    order = np.argsort(recall, kind="stable")
    r = np.asarray(recall, dtype=np.float64)[order]
    p = np.asarray(precision, dtype=np.float64)[order]
    # interpolated precision at r: best precision at any recall >= r
    p_env = np.maximum.accumulate(p[::-1])[::-1]
    area = 0.0
    prev = 0.0
    for ri, pi in zip(r, p_env):
        area += (ri - prev) * pi
        prev = max(prev, ri)
    return float(area)


def evaluate_dataset(preds: list, gts: list, cfg: MatchConfig | None = None, names: list | None = None) -> EvalSummary:
    cfg = cfg or MatchConfig()
    if len(preds) != len(gts):
        raise EvaluationError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    if not preds:
        raise EvaluationError("nothing to evaluate: no prediction/ground-truth pairs")
    names = names or [f"image{i:04d}" for i in range(len(preds))]
    counts = np.stack([image_counts(p, g, cfg) for p, g in zip(preds, gts)])  # N x T x 3
    return summarize(counts, cfg, names)


def summarize(counts: np.ndarray, cfg: MatchConfig, names: list) -> EvalSummary:
    thresholds = cfg.thresholds()
    agg = counts.sum(axis=0)
    p, r = precision_recall(agg[:, 0], agg[:, 1], agg[:, 2])
    f = f_measure(p, r)
    best = int(np.argmax(f))
    curve = [PRPoint(float(thresholds[k]), int(agg[k, 0]), int(agg[k, 1]), int(agg[k, 2]),
                     float(p[k]), float(r[k]), float(f[k])) for k in range(len(thresholds))]
    ois, choice = best_combined_thresholds(counts, start=float(f[best]))
    per_f = _f_counts(counts[..., 0], counts[..., 1], counts[..., 2])  # N x T
    per_image = []
    for i, name in enumerate(names):
        k = int(np.argmax(per_f[i]))
        per_image.append({"name": name, "best_f": float(per_f[i, k]), "best_threshold": float(thresholds[k]),
                          "ois_threshold": float(thresholds[choice[i]])})
    return EvalSummary(ods=float(f[best]), ods_threshold=float(thresholds[best]), ois=float(ois),
                       ap=average_precision(p, r), curve=curve, per_image=per_image, config=asdict(cfg))


def write_results(summary: EvalSummary, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "tp", "fp", "fn", "precision", "recall", "f"])
        for pt in summary.curve:
            w.writerow([repr(pt.threshold), pt.tp, pt.fp, pt.fn, repr(pt.precision), repr(pt.recall), repr(pt.f)])
    doc = {"ods": summary.ods, "ods_threshold": summary.ods_threshold, "ois": summary.ois, "ap": summary.ap,
           "config": summary.config, "per_image": summary.per_image}
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# ingestion

class MissingCounterpartError(EvaluationError):
    pass


def _load_dir(paths) -> dict[str, np.ndarray]:
    return {p.stem: read_gray(p).astype(np.float64) / 255.0 for p in paths}


def ingest_predictions(directory, map_name: str = "fused") -> dict[str, np.ndarray]:
    """Flat ``<stem>.png`` files, or per-image folders ``<stem>/<map_name>.png``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {d}")
    maps = _load_dir(list_pngs(d))
    for sub in sorted(p for p in d.iterdir() if p.is_dir()):
        f = sub / f"{map_name}.png"
        if f.is_file():
            maps[sub.name] = read_gray(f).astype(np.float64) / 255.0
    return maps


def ingest_gt(directory, layout: str = "flat", split: str = "test") -> dict[str, np.ndarray]:
    """``flat``: PNGs directly in ``directory``; ``biped``: ``<root>/edge_maps/<split>/``."""
    d = Path(directory)
    if layout == "biped":
        d = d / "edge_maps" / split
    elif layout != "flat":
        raise ConfigError(f"unknown ground-truth layout {layout!r}")
    if not d.is_dir():
        raise FileNotFoundError(f"ground-truth directory not found: {d}")
    return _load_dir(list_pngs(d))


def align(preds: dict, gts: dict) -> tuple[list[str], list, list]:
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        parts = []
        if missing_pred:
            parts.append(f"no prediction for: {', '.join(missing_pred)}")
        if missing_gt:
            parts.append(f"no ground truth for: {', '.join(missing_gt)}")
        raise MissingCounterpartError("; ".join(parts))
    names = sorted(gts)
    return names, [preds[n] for n in names], [gts[n] for n in names]
