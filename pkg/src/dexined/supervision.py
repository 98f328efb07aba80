"""Class-balanced cross-entropy and its deeply supervised sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ConfigError, EdgeMapSet


@dataclass
class GroundTruthMap:
    """Binary edge mask of shape N x 1 x H x W (1 = edge) with cached pixel counts."""

    mask: np.ndarray
    n_edge: np.ndarray = field(init=False)
    n_background: np.ndarray = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim == 2:
            m = m[None, None]
        elif m.ndim == 3:
            m = m[:, None]
        if m.ndim != 4 or m.shape[1] != 1:
            raise ad.ShapeError(f"ground truth must be H x W, N x H x W or N x 1 x H x W, got {np.shape(self.mask)}")
        if m.size == 0:
            raise ad.ArgumentError("empty ground-truth map")
        self.mask = binarize(m)
        self.n_edge = self.mask.sum(axis=(1, 2, 3))
        self.n_background = self.mask[0].size - self.n_edge

    @property
    def shape(self):
        return self.mask.shape


def binarize(values: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Fractional annotations -> {0, 1}; values >= threshold count as edge."""
    v = np.asarray(values, dtype=np.float64)
    return (v >= threshold).astype(np.float64)


@dataclass
class SupervisionConfig:
    weights: tuple = (1.0,) * 7
    reduction: str = "sum"  # "mean" divides each per-output loss by the pixel count

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if any(w < 0 for w in self.weights) or not any(w > 0 for w in self.weights):
            raise ConfigError("output weights must be >= 0 with at least one > 0")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")

    @property
    def n_outputs(self) -> int:
        return len(self.weights)


def class_balance(gt: GroundTruthMap):
    """Per-image (beta, 1 - beta): beta is the non-edge fraction and weights edge pixels."""
    total = gt.n_edge + gt.n_background
    if np.any(total == 0):
        raise ad.ArgumentError("empty ground-truth map")
    beta = gt.n_background / total
    return beta, gt.n_edge / total


def _softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def weighted_bce(logits: Tensor, gt: GroundTruthMap, reduction: str = "sum") -> Tensor:
    """-beta * sum_{edge} log s(z) - (1 - beta) * sum_{non-edge} log(1 - s(z)), summed over the batch.

    Uses -log s(z) = softplus(-z) and -log(1 - s(z)) = softplus(z), so no
    large logit is ever exponentiated.
    """
    if logits.shape != gt.shape:
        raise ad.ShapeError(f"logits {logits.shape} and ground truth {gt.shape} differ")
    z = logits.data
    y = gt.mask.astype(z.dtype)
    beta, one_minus = class_balance(gt)
    b = beta.astype(z.dtype)[:, None, None, None]
    omb = one_minus.astype(z.dtype)[:, None, None, None]
    norm = 1.0 if reduction == "sum" else 1.0 / gt.mask[0].size
    pos_w = b * y * norm
    neg_w = omb * (1 - y) * norm
    loss = np.sum(pos_w * _softplus(-z) + neg_w * _softplus(z))
    sig = ad.sigmoid(Tensor(z)).data

    def backward_bce(g):
        return (g * (neg_w * sig - pos_w * (1 - sig)),)

    return ad.record("weighted_bce", (logits,), np.asarray(loss, dtype=z.dtype), backward_bce)


def per_output_losses(maps: EdgeMapSet, gt: GroundTruthMap, cfg: SupervisionConfig) -> list[Tensor]:
    outs = maps.logits
    if len(cfg.weights) != len(outs):
        raise ConfigError(f"{len(cfg.weights)} output weights for {len(outs)} supervised outputs")
    return [weighted_bce(o, gt, cfg.reduction) for o in outs]


def total_loss(maps: EdgeMapSet, gt: GroundTruthMap, cfg: SupervisionConfig | None = None,
               parts: list | None = None) -> Tensor:
    """sum_n weight_n * loss_n over the six side outputs and the fused output.

    If ``parts`` is given, the per-output loss tensors are appended to it.
    """
    cfg = cfg or SupervisionConfig()
    losses = per_output_losses(maps, gt, cfg)
    if parts is not None:
        parts.extend(losses)
    return ad.weighted_sum(losses, cfg.weights)
