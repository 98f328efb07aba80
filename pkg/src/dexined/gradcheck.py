"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


def numerical_grad(f: Callable[[], float], arr: np.ndarray, index=None, step: float = 1e-4) -> np.ndarray | float:
    """Central difference of scalar ``f`` w.r.t. ``arr`` (perturbed in place).

    With ``index`` only that entry is differentiated.
    """
    if index is not None:
        old = arr[index]
        arr[index] = old + step
        fp = f()
        arr[index] = old - step
        fm = f()
        arr[index] = old
        return (fp - fm) / (2 * step)
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        g[idx] = numerical_grad(f, arr, idx, step)
    return g


def directional_derivative(f: Callable[[], float], arrays: Sequence[np.ndarray],
                           directions: Sequence[np.ndarray], step: float = 1e-4) -> float:
    """(f(x + h v) - f(x - h v)) / 2h with all arrays moved jointly, then restored exactly."""
    saved = [a.copy() for a in arrays]
    for a, v in zip(arrays, directions):
        a += step * v
    fp = f()
    for a, s, v in zip(arrays, saved, directions):
        a[...] = s - step * v
    fm = f()
    for a, s in zip(arrays, saved):
        a[...] = s
    return (fp - fm) / (2 * step)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
             step: float = 1e-4) -> float:
    """Max relative error between tape and finite-difference gradients of
    ``sum(fn(*inputs) * w)`` for a fixed random weight ``w``, over every input entry."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    rng = np.random.default_rng(seed)
    probe = fn(*tensors)
    w = rng.standard_normal(probe.shape)

    def loss_value() -> float:
        return float(np.sum(fn(*tensors).data * w))

    from .autodiff import record  # local: keeps module import light

    with Tape() as tape:
        out = fn(*tensors)
        loss = record("probe", (out,), np.asarray(np.sum(out.data * w)), lambda g: (g * w,))
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(loss_value, t.data, step=step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# catalogue of every differentiable op, with small random double inputs

def _r(rng, *shape):
    return rng.standard_normal(shape)


def _bn_train(x, g, b):
    from . import autodiff as ad
    c = x.shape[1]
    return ad.batch_norm(x, g, b, np.zeros(c), np.ones(c), True)


def _bn_infer(x, g, b):
    from . import autodiff as ad
    c = x.shape[1]
    return ad.batch_norm(x, g, b, np.full(c, 0.3), np.full(c, 1.7), False)


def _bce(z):
    from .supervision import GroundTruthMap, weighted_bce
    gt = GroundTruthMap((np.arange(np.prod(z.shape)).reshape(z.shape) % 3 == 0).astype(float))
    return weighted_bce(z, gt)


def op_cases() -> dict:
    """name -> (fn(*tensors) -> Tensor, make_inputs(rng) -> list of arrays)."""
    from . import autodiff as ad

    return {
        "conv2d_s1": (lambda x, k, b: ad.conv2d(x, k, b), lambda r: [_r(r, 2, 3, 5, 5), _r(r, 2, 3, 3, 3), _r(r, 2)]),
        "conv2d_s2": (lambda x, k: ad.conv2d(x, k, stride=2), lambda r: [_r(r, 1, 2, 6, 5), _r(r, 3, 2, 3, 3)]),
        "conv2d_valid": (lambda x, k: ad.conv2d(x, k, padding="VALID"), lambda r: [_r(r, 1, 2, 5, 5), _r(r, 2, 2, 3, 3)]),
        "conv2d_1x1": (lambda x, k, b: ad.conv2d(x, k, b, stride=2),
                       lambda r: [_r(r, 2, 10, 4, 4), _r(r, 3, 10, 1, 1), _r(r, 3)]),
        "conv2d_1x1_small": (lambda x, k: ad.conv2d(x, k), lambda r: [_r(r, 1, 6, 3, 3), _r(r, 1, 6, 1, 1)]),
        "tconv_k2": (lambda x, k, b: ad.transpose_conv2d(x, k, 2, b),
                     lambda r: [_r(r, 1, 2, 3, 3), _r(r, 2, 3, 2, 2), _r(r, 3)]),
        "tconv_k4": (lambda x, k: ad.transpose_conv2d(x, k, 2), lambda r: [_r(r, 1, 2, 3, 3), _r(r, 2, 1, 4, 4)]),
        "max_pool": (lambda x: ad.max_pool(x), lambda r: [_r(r, 2, 2, 5, 6)]),
        "batch_norm_train": (_bn_train, lambda r: [_r(r, 3, 2, 3, 3), _r(r, 2), _r(r, 2)]),
        "batch_norm_infer": (_bn_infer, lambda r: [_r(r, 2, 2, 3, 3), _r(r, 2), _r(r, 2)]),
        "relu": (ad.relu, lambda r: [_r(r, 1, 2, 4, 4)]),
        "sigmoid": (ad.sigmoid, lambda r: [_r(r, 1, 2, 4, 4)]),
        "pixel_shuffle": (lambda x: ad.pixel_shuffle(x, 2), lambda r: [_r(r, 1, 8, 2, 3)]),
        "pixel_unshuffle": (lambda x: ad.pixel_unshuffle(x, 2), lambda r: [_r(r, 1, 2, 4, 6)]),
        "concat": (lambda a, b: ad.concat([a, b]), lambda r: [_r(r, 1, 2, 3, 3), _r(r, 1, 1, 3, 3)]),
        "crop": (lambda x: ad.crop(x, 1, 0, 2, 3), lambda r: [_r(r, 1, 2, 4, 4)]),
        "add": (ad.add, lambda r: [_r(r, 1, 1, 3, 3), _r(r, 1, 1, 3, 3)]),
        "scale": (lambda a: ad.scale(a, -1.7), lambda r: [_r(r, 2, 3)]),
        "average": (lambda a, b, c: ad.average([a, b, c]), lambda r: [_r(r, 2, 3), _r(r, 2, 3), _r(r, 2, 3)]),
        "weighted_sum": (lambda a, b: ad.weighted_sum([a, b], [0.3, 2.0]), lambda r: [_r(r, 2, 3), _r(r, 2, 3)]),
        "total": (ad.total, lambda r: [_r(r, 2, 3, 2)]),
        "weighted_bce": (_bce, lambda r: [_r(r, 2, 1, 3, 4) * 3]),
    }


def check_all_ops(seed: int = 0, step: float = 1e-4) -> dict[str, float]:
    cases = op_cases()
    return {name: check_op(fn, make(np.random.default_rng([seed, i])), seed=seed, step=step)
            for i, (name, (fn, make)) in enumerate(sorted(cases.items()))}


def check_model(graph, x: np.ndarray, gt, samples_per_tensor: int = 2, seed: int = 0,
                step: float = 1e-4) -> dict[str, float]:
    """Tape gradients of the total loss vs central differences on a double-precision model.

    A full sweep over every weight is far too slow, so each trainable tensor
    contributes ``samples_per_tensor`` random entries, and a unit-norm random
    direction through all parameters jointly checks the whole gradient at once.

    With thousands of relus and pool windows a step of 1e-4 routinely pushes
    some unit across its kink, which breaks the difference quotient, not the
    gradient. Probes therefore replay the base point's branch choices, so both
    sides of the difference lie on the piece whose derivative the tape computes.
    """
    from .autodiff import record_branches, replay_branches
    from .model import forward
    from .supervision import total_loss

    if graph.dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    buffers = {p.name: p.value.data.copy() for p in graph.params if not p.trainable}

    def restore():
        for p in graph.params:
            if p.name in buffers:  # batch statistics must not drift between probes
                p.value.data[...] = buffers[p.name]

    graph.zero_grad()
    with Tape() as tape, record_branches() as branches:
        loss = total_loss(forward(graph, x, training=True), gt)
    restore()
    tape.backward(loss)
    params = graph.trainable()
    grads = {p.name: p.value.grad.copy() for p in params}
    graph.zero_grad()

    def f() -> float:
        with replay_branches(branches):
            v = total_loss(forward(graph, x, training=True), gt).item()
        restore()
        return v

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        arr = p.value.data
        for flat in rng.choice(arr.size, min(samples_per_tensor, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            worst = max(worst, relative_error(grads[p.name][idx], numerical_grad(f, arr, idx, step)))
    dirs = [rng.standard_normal(p.value.data.shape) for p in params]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
    dirs = [d / norm for d in dirs]
    num = directional_derivative(f, [p.value.data for p in params], dirs, step)
    ana = sum(float(np.sum(grads[p.name] * d)) for p, d in zip(params, dirs))
    return {"entries": worst, "direction": relative_error(ana, num)}
