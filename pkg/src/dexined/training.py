"""Adam training loop with checkpoints, loss log and deterministic resume."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ConfigError, EncoderGraph, forward, image_to_input
from .supervision import GroundTruthMap, SupervisionConfig, total_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NumericalError(TrainingError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_iterations: int = 150_000
    seed: int = 0
    checkpoint_every: int = 5_000
    crop_size: int = 400
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    val_fraction: float = 0.1
    lr_decay_every: int = 0      # 0 disables step decay
    lr_decay_factor: float = 0.1
    log_every: int = 50

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop_size < 16 or self.crop_size % 16:
            raise ConfigError("crop_size must be a positive multiple of 16")
        if self.max_iterations < 0 or self.checkpoint_every < 1:
            raise ConfigError("max_iterations must be >= 0 and checkpoint_every >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Short schedule for the width-1/8 model on a handful of images."""
        base = dict(batch_size=2, max_iterations=2000, checkpoint_every=500, learning_rate=1e-2,
                    val_fraction=0.0, log_every=100)
        base.update(overrides)
        return cls(**base)

    def lr_at(self, step: int) -> float:
        if self.lr_decay_every:
            return self.learning_rate * self.lr_decay_factor ** ((step - 1) // self.lr_decay_every)
        return self.learning_rate


# ---------------------------------------------------------------------------
# Adam

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: list[Parameter], state: OptimizerState, cfg: TrainConfig, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place; gradients are cleared afterwards."""
    lr = cfg.learning_rate if lr is None else lr
    for p in params:
        if p.trainable and p.value.grad is None:
            raise TrainingError(f"no gradient for trainable parameter {p.name!r}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p in params:
        if not p.trainable:
            continue
        w = p.value
        g = w.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(w.data)
            state.v[p.name] = np.zeros_like(w.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)).astype(w.dtype, copy=False)
        w.data = w.data - update
        w.grad = None


# ---------------------------------------------------------------------------
# data

@dataclass
class EdgeDataset:
    """In-memory (image, edge map) pairs: H x W x 3 uint8 images, H x W {0,1} maps."""

    images: list
    edges: list
    names: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.edges):
            raise ConfigError("images and edge maps differ in number")
        if not self.names:
            self.names = [f"pair{i:04d}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "EdgeDataset":
        return EdgeDataset([self.images[i] for i in idx], [self.edges[i] for i in idx], [self.names[i] for i in idx])


def split_validation(data: EdgeDataset, fraction: float, seed: int) -> tuple[EdgeDataset, EdgeDataset]:
    n_val = int(len(data) * fraction)
    order = np.random.default_rng([seed, 0xA1]).permutation(len(data))
    return data.subset(sorted(order[n_val:])), data.subset(sorted(order[:n_val]))


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> list[int]:
    """Sample ids for a 1-based step: consecutive slices of per-epoch seeded shuffles."""
    out = []
    for k in range((step - 1) * batch_size, step * batch_size):
        epoch, pos = divmod(k, n)
        out.append(int(np.random.default_rng([seed, epoch]).permutation(n)[pos]))
    return out


def _crop_pair(img, edge, size, rng):
    h, w = edge.shape
    if h < size or w < size:
        ph, pw = max(size - h, 0), max(size - w, 0)
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
        edge = np.pad(edge, ((0, ph), (0, pw)))
        h, w = edge.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top:top + size, left:left + size], edge[top:top + size, left:left + size]


def make_batch(data: EdgeDataset, step: int, cfg: TrainConfig, dtype) -> tuple[np.ndarray, GroundTruthMap, list[int]]:
    ids = batch_indices(step, len(data), cfg.batch_size, cfg.seed)
    rng = np.random.default_rng([cfg.seed, step, 0xC0])
    xs, ys = [], []
    for i in ids:
        img, edge = _crop_pair(data.images[i], data.edges[i], cfg.crop_size, rng)
        xs.append(image_to_input(img, dtype)[0])
        ys.append(edge)
    return np.stack(xs), GroundTruthMap(np.stack(ys)[:, None].astype(np.float64)), ids


# ---------------------------------------------------------------------------
# loop

LOG_FIELDS = ["step", "total"] + [f"l{i}" for i in range(1, 8)] + ["wall_time"]


@dataclass
class TrainResult:
    rows: list
    last_step: int
    checkpoints: list


def train_step(graph: EncoderGraph, state: OptimizerState, x: np.ndarray, gt: GroundTruthMap,
               cfg: TrainConfig, sup: SupervisionConfig, lr: float) -> tuple[float, list[float]]:
    parts: list = []
    with ad.Tape() as tape:
        maps = forward(graph, x, training=True)
        loss = total_loss(maps, gt, sup, parts=parts)
    value = loss.item()
    if not np.isfinite(value):
        graph.zero_grad()
        return value, [p.item() for p in parts]
    tape.backward(loss)
    adam_step(graph.trainable(), state, cfg, lr)
    return value, [p.item() for p in parts]


def evaluate_loss(graph: EncoderGraph, data: EdgeDataset, sup: SupervisionConfig) -> float:
    values = []
    for img, edge in zip(data.images, data.edges):
        maps = forward(graph, image_to_input(img, graph.dtype), training=False)
        values.append(total_loss(maps, GroundTruthMap(edge.astype(np.float64)), sup).item())
    return float(np.mean(values)) if values else float("nan")


def latest_checkpoint(out_dir) -> Path | None:
    ckpts = sorted(Path(out_dir, "checkpoints").glob("step_*.ckpt"))
    return ckpts[-1] if ckpts else None


def train(graph: EncoderGraph, data: EdgeDataset, cfg: TrainConfig, out_dir=None,
          sup: SupervisionConfig | None = None, state: OptimizerState | None = None,
          start_step: int = 0, stop_step: int | None = None) -> TrainResult:
    """Run steps ``start_step + 1 .. stop_step`` (default ``cfg.max_iterations``).

    Everything random (batch order, crops) is a function of ``cfg.seed`` and
    the step number, so a run resumed from a checkpoint replays exactly.
    """
    if len(data) == 0:
        raise ConfigError("training dataset is empty")
    sup = sup or SupervisionConfig()
    state = state or OptimizerState()
    stop_step = cfg.max_iterations if stop_step is None else stop_step
    train_set, val_set = split_validation(data, cfg.val_fraction, cfg.seed)
    if len(train_set) == 0:
        raise ConfigError("no training pairs left after the validation split")
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.csv"
        new = not log_path.exists() or start_step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
    rows = []
    ckpts = []
    t0 = time.perf_counter()
    try:
        for step in range(start_step + 1, stop_step + 1):
            x, gt, ids = make_batch(train_set, step, cfg, graph.dtype)
            value, parts = train_step(graph, state, x, gt, cfg, sup, cfg.lr_at(step))
            if not np.isfinite(value):
                names = [train_set.names[i] for i in ids]
                raise NumericalError(f"non-finite loss {value} at iteration {step}, batch {names}")
            row = [step, value, *parts, round(time.perf_counter() - t0, 3)]
            rows.append(row)
            if writer is not None:
                writer.writerow([step, repr(value), *map(repr, parts), row[-1]])
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.4f", step, value)
            if out is not None and (step % cfg.checkpoint_every == 0 or step == stop_step):
                path = out / "checkpoints" / f"step_{step:07d}.ckpt"
                save_checkpoint(path, graph, state, step, extra={"train_config": asdict(cfg),
                                                                 "supervision": list(sup.weights)})
                ckpts.append(path)
                fh.flush()
                if len(val_set):
                    _append_val(out / "val_log.csv", step, evaluate_loss(graph, val_set, sup))
    finally:
        if writer is not None:
            fh.close()
    return TrainResult(rows, stop_step, ckpts)


def _append_val(path: Path, step: int, value: float) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "val_loss"])
        w.writerow([step, repr(value)])


def resume(path, data: EdgeDataset, cfg: TrainConfig, out_dir=None, sup=None, stop_step=None) -> tuple[EncoderGraph, TrainResult]:
    graph, state, step, _ = load_checkpoint(path)
    if state is None:
        raise TrainingError(f"{path} holds no optimizer state; cannot resume")
    result = train(graph, data, cfg, out_dir, sup, state, start_step=step, stop_step=stop_step)
    return graph, result
