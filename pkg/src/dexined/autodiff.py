"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the edge detector needs are provided. Every op takes and
returns :class:`Tensor` objects; when a :class:`Tape` is active and at least
one input requires a gradient, the op appends a :class:`TapeNode` holding a
closure over the activations its backward pass needs.

Layout is NCHW throughout. Convolutions are cross-correlations (no kernel
flip) and SAME padding follows the ``out = ceil(in / stride)`` rule with the
odd extra pixel placed at the bottom/right.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(ValueError):
    """An op argument is out of its domain."""


class GradientStateError(RuntimeError):
    """backward() was called while gradients from a previous pass are still set."""


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """Named entry of a :class:`ParameterStore`."""

    name: str
    value: Tensor
    trainable: bool = True


class ParameterStore:
    """Ordered, name-unique collection of parameters and buffers."""

    def __init__(self) -> None:
        self._items: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self._items[name] = Parameter(name, t, trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items.values())

    def names(self) -> list[str]:
        return list(self._items)

    def parameter(self, name: str) -> Parameter:
        return self._items[name]

    def trainable(self) -> list[Parameter]:
        return [p for p in self._items.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._items.values():
            p.value.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.data for name, p in self._items.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._items) - set(state)
        extra = set(state) - set(self._items)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self._items.items():
            arr = np.asarray(state[name])
            if arr.shape != p.value.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != parameter shape {p.value.shape}")
            p.value.data = arr.astype(p.value.dtype, copy=True)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # Closure over saved activations: grad_output -> one grad (or None) per input.
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] = field(repr=False)


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records ops executed inside ``with Tape() as tape:``.

    Nodes are stored in execution order, which is a topological order of the
    graph; :meth:`backward` walks them in exact reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise GradientStateError("tape already consumed by a previous backward()")
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        stale = [t.name or repr(t) for t in leaves.values() if t.grad is not None]
        if stale:
            raise GradientStateError(
                f"gradients not reset before backward(): {stale[:5]}{'...' if len(stale) > 5 else ''}"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, t in leaves.items():
            if key in grads:
                t.grad = grads[key].astype(t.dtype, copy=False)
        self._consumed = True
        self.nodes.clear()


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` of every leaf reachable from ``loss``."""
    tape = tape or loss.tape or current_tape()
    if tape is None:
        raise ArgumentError("no active tape; run the forward pass inside `with Tape():`")
    tape.backward(loss)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` in a Tensor and put it on the active tape when needed.

    Also the extension point for ops defined outside this module.
    """
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        tape.record(TapeNode(op, tuple(inputs), result, backward_fn))
        result.tape = tape
    return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# padding helpers

def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return (out, pad_before, pad_after) for SAME padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _check4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a rank-4 NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "SAME") -> Tensor:
    """2-D cross-correlation. ``kernel`` is [outC, inC, kH, kW]."""
    _check4(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if not isinstance(stride, (int, np.integer)) or stride <= 0:
        raise ArgumentError(f"stride must be a positive integer, got {stride!r}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel {kernel.shape}")
    n, c, h, w = x.shape
    oc, _, kh, kw = kernel.shape
    if padding == "SAME":
        ho, pt, pb = same_padding(h, kh, stride)
        wo, pl, pr = same_padding(w, kw, stride)
    elif padding == "VALID":
        if h < kh or w < kw:
            raise ShapeError(f"VALID conv2d: input {x.shape} smaller than kernel {kernel.shape}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ArgumentError(f"padding must be SAME or VALID, got {padding!r}")

    K = kernel.data
    xd = x.data
    if kh == 1 and kw == 1 and pt == pb == pl == pr == 0:
        xs = xd[:, :, ::stride, ::stride]
        if c <= 8:
            # Small fan-in: accumulate channels in order so the result is
            # bit-identical to an ordered weighted sum of the input maps.
            out = xs[:, 0:1] * K[:, 0, 0, 0][None, :, None, None]
            for ci in range(1, c):
                out = out + xs[:, ci:ci + 1] * K[:, ci, 0, 0][None, :, None, None]
        else:
            out = np.einsum("nchw,oc->nohw", xs, K[:, :, 0, 0], optimize=True)
        if bias is not None:
            out = out + bias.data[None, :, None, None]

        def backward_1x1(g):
            gk = np.einsum("nohw,nchw->oc", g, xs, optimize=True)[:, :, None, None]
            gx = None
            if x.requires_grad:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = np.einsum("nohw,oc->nchw", g, K[:, :, 0, 0], optimize=True)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (gx, gk) if bias is None else (gx, gk, gb)

        inputs = (x, kernel) if bias is None else (x, kernel, bias)
        return record("conv2d", inputs, out, backward_1x1)

    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: (N, C, Ho, Wo, kH, kW)
    out = np.tensordot(win, K, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_conv(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, K, axes=([1], [0]))  # (N, Ho, Wo, C, kH, kW)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt:pt + h, pl:pl + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, out, backward_conv)


def transpose_conv2d(x: Tensor, kernel: Tensor, stride: int, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution upsampling by ``stride``.

    ``kernel`` is [inC, outC, k, k] with ``k >= stride`` and ``k - stride``
    even; the (k - stride) / 2 border rows/cols of the full result are cropped
    so the output is exactly ``stride`` times the input size.
    """
    _check4(x, "transpose_conv2d")
    if not isinstance(stride, (int, np.integer)) or stride < 2:
        raise ArgumentError(f"transpose_conv2d stride must be >= 2, got {stride!r}")
    if kernel.ndim != 4 or kernel.shape[0] != x.shape[1]:
        raise ShapeError(f"transpose_conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    k = kernel.shape[2]
    if kernel.shape[3] != k or k < stride or (k - stride) % 2:
        raise ArgumentError(f"kernel {kernel.shape} incompatible with stride {stride}")
    n, c, h, w = x.shape
    oc = kernel.shape[1]
    s = stride
    crop = (k - s) // 2
    K = kernel.data
    xd = x.data
    cols = np.tensordot(xd, K, axes=([1], [0]))  # (N, H, W, OC, k, k)
    full = np.zeros((n, oc, (h - 1) * s + k, (w - 1) * s + k), dtype=np.result_type(xd, K))
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w - 1) + 1:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, crop:crop + h * s, crop:crop + w * s]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_tconv(g):
        gfull = np.zeros_like(full)
        gfull[:, :, crop:crop + h * s, crop:crop + w * s] = g
        win = np.empty((n, oc, h, w, k, k), dtype=gfull.dtype)
        for i in range(k):
            for j in range(k):
                win[..., i, j] = gfull[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w - 1) + 1:s]
        gk = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3]))  # (C, OC, k, k)
        gx = None
        if x.requires_grad:
            gx = np.tensordot(win, K, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("transpose_conv2d", inputs, out, backward_tconv)


def bilinear_weights_1d(size: int) -> np.ndarray:
    """Classic bilinear upsampling taps, e.g. size 4 -> [0.25, 0.75, 0.75, 0.25]."""
    if size < 2:
        raise ArgumentError(f"bilinear kernel size must be >= 2, got {size}")
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size, dtype=np.float64)
    return 1.0 - np.abs(og - center) / factor


def bilinear_kernel(size: int, channels: int, stride: int = 2) -> np.ndarray:
    """Channel-wise bilinear transposed-conv kernel [channels, channels, size, size].

    Taps are rescaled so that every output pixel away from the border receives
    weights summing to one for the given ``stride``; a constant input then
    upsamples to the same constant. For size 4 / stride 2 the rescale is a
    no-op; for size 2 / stride 2 each tap becomes 1.
    """
    if size < 2:
        raise ArgumentError(f"bilinear kernel size must be >= 2, got {size}")
    if channels < 1:
        raise ArgumentError(f"channels must be >= 1, got {channels}")
    w1 = bilinear_weights_1d(size)
    phase = np.array([w1[p::stride].sum() for p in range(min(stride, size))])
    w1 = w1 / phase.mean()
    w2 = np.outer(w1, w1)
    kernel = np.zeros((channels, channels, size, size))
    for ch in range(channels):
        kernel[ch, ch] = w2
    return kernel


# ---------------------------------------------------------------------------
# branch tracing for gradient checks

_branches = threading.local()


@contextmanager
def record_branches():
    """Collect every piecewise op's branch choice (relu sign mask, pool argmax) in call order."""
    prev = getattr(_branches, "state", None)
    log: list[np.ndarray] = []
    _branches.state = ("record", log)
    try:
        yield log
    finally:
        _branches.state = prev


@contextmanager
def replay_branches(log: Sequence[np.ndarray]):
    """Re-run with the recorded branch choices forced.

    The forward pass then evaluates the smooth piece that contains the recorded
    point, so central differences of any step size see no kinks.
    """
    prev = getattr(_branches, "state", None)
    _branches.state = ("replay", iter(log))
    try:
        yield
    finally:
        _branches.state = prev


def _branch(choice: np.ndarray) -> np.ndarray:
    state = getattr(_branches, "state", None)
    if state is None:
        return choice
    mode, store = state
    if mode == "record":
        store.append(choice.copy())
        return choice
    forced = next(store)
    if forced.shape != choice.shape:
        raise GradientStateError("replayed branch pattern does not match the graph being run")
    return forced


# ---------------------------------------------------------------------------
# pooling / normalization / activations

def max_pool(x: Tensor, window: int = 3, stride: int = 2) -> Tensor:
    """SAME-padded max pooling; gradient goes to the first argmax of each window."""
    _check4(x, "max_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"max_pool on empty spatial extent {x.shape}")
    ho, pt, pb = same_padding(h, window, stride)
    wo, pl, pr = same_padding(w, window, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = _branch(flat.argmax(axis=-1))
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_pool(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(window * window):
            i, j = divmod(k, window)
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += np.where(arg == k, g, 0)
        return (gxp[:, :, pt:pt + h, pl:pl + w],)

    return record("max_pool", (x,), out, backward_pool)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.99,
               epsilon: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running buffers
    (modified in place) follow ``r = momentum * r + (1 - momentum) * batch``.
    """
    _check4(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match channels {c}")
    if n * h * w == 0:
        raise ArgumentError(f"batch_norm on zero-size batch {x.shape}")
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        m = n * h * w
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
        xc = xd - mean[None, :, None, None]
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward_bn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                gx = inv[None, :, None, None] * (
                    gxhat
                    - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return record("batch_norm", (x, gamma, beta), out, backward_bn)


def relu(x: Tensor) -> Tensor:
    mask = _branch(x.data > 0)
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return record("relu", (x,), out, lambda g: (np.where(mask, g, 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    # exp only of non-positive numbers
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ArgumentError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# rearrangement

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[N, C*r*r, H, W] -> [N, C, H*r, W*r]; out[c, h*r+i, w*r+j] = in[c*r*r + i*r + j, h, w]."""
    _check4(x, "pixel_shuffle")
    n, cr, h, w = x.shape
    if r < 1 or cr % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {cr} not divisible by r^2={r * r}")
    c = cr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def backward_ps(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, cr, h, w),)

    return record("pixel_shuffle", (x,), out, backward_ps)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    _check4(x, "pixel_unshuffle")
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def backward_pu(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hr, wr),)

    return record("pixel_unshuffle", (x,), out, backward_pu)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    shapes = [t.shape for t in xs]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(s, ref)) if k != axis):
            raise ShapeError(f"concat shape mismatch: {shapes}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    splits = np.cumsum([s[axis] for s in shapes])[:-1]
    return record("concat", tuple(xs), out, lambda g: tuple(np.split(g, splits, axis=axis)))


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    _check4(x, "crop")
    n, c, h, w = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ShapeError(f"crop window ({top},{left},{height},{width}) outside {x.shape}")
    out = x.data[:, :, top:top + height, left:left + width]

    def backward_crop(g):
        gx = np.zeros_like(x.data)
        gx[:, :, top:top + height, left:left + width] = g
        return (gx,)

    return record("crop", (x,), out, backward_crop)


# ---------------------------------------------------------------------------
# elementwise

def _same_shape(xs: Iterable[Tensor], op: str) -> None:
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise ShapeError(f"{op}: operands have different shapes {sorted(shapes)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape((a, b), "add")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def average(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean, computed as an ordered sum of ``x_i * (1/k)``."""
    if not xs:
        raise ArgumentError("average of an empty list")
    _same_shape(xs, "average")
    k = len(xs)
    w = np.asarray(1.0 / k, dtype=xs[0].dtype)
    out = xs[0].data * w
    for t in xs[1:]:
        out = out + t.data * w
    return record("average", tuple(xs), out, lambda g: tuple(g * w for _ in range(k)))


def weighted_sum(xs: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """sum_i weights[i] * xs[i] for same-shape tensors (scalars included)."""
    if len(xs) != len(weights) or not xs:
        raise ArgumentError(f"weighted_sum: {len(xs)} tensors vs {len(weights)} weights")
    _same_shape(xs, "weighted_sum")
    out = xs[0].data * weights[0]
    for t, wt in zip(xs[1:], weights[1:]):
        out = out + t.data * wt
    return record("weighted_sum", tuple(xs), np.asarray(out), lambda g: tuple(g * wt for wt in weights))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


__all__ = [
    "ArgumentError", "GradientStateError", "Parameter", "ParameterStore", "ShapeError", "Tape",
    "TapeNode", "Tensor", "activation", "add", "as_tensor", "average", "backward", "batch_norm",
    "bilinear_kernel", "bilinear_weights_1d", "concat", "conv2d", "crop", "current_tape", "max_pool",
    "pixel_shuffle", "pixel_unshuffle", "record", "relu", "same_padding", "scale", "sigmoid", "total",
    "transpose_conv2d", "weighted_sum",
]
