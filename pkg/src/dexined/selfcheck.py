"""Fast invariant suite behind ``dexined selfcheck``."""

from __future__ import annotations

import math
import time
from contextlib import ExitStack
from dataclasses import dataclass
from unittest import mock

import numpy as np

from . import autodiff as ad
from . import evaluation, model
from .gradcheck import check_all_ops, check_model
from .model import SIDE_SCALES, ModelConfig, build_model, forward, plan_upsampling
from .supervision import GroundTruthMap

GROUPS = ("gradients", "fusion_init", "scale_plan", "matcher")
TOLERANCE = 1e-3


@dataclass
class GroupResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:<12} {self.detail} ({self.seconds:.1f}s)"


def _gradients() -> tuple[bool, str]:
    ops = check_all_ops()
    worst_op = max(ops, key=ops.get)
    g = build_model(ModelConfig.toy(dtype="float64"), seed=0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3, 64, 64))
    gt = GroundTruthMap((rng.random((1, 1, 64, 64)) < 0.1).astype(float))
    m = check_model(g, x, gt, samples_per_tensor=1)
    worst = max(ops[worst_op], m["entries"], m["direction"])
    detail = f"ops max rel err {ops[worst_op]:.1e} ({worst_op}), model {max(m['entries'], m['direction']):.1e}"
    return worst < TOLERANCE, detail


def _fusion_init() -> tuple[bool, str]:
    worst = 0.0
    for variant in model.VARIANTS:
        g = build_model(ModelConfig.toy(variant=variant), seed=1)
        x = np.random.default_rng(1).standard_normal((1, 3, 48, 32)).astype(np.float32)
        out = forward(g, x)
        worst = max(worst, float(np.max(np.abs(out.fused.data - ad.average(out.sides).data))))
    return worst == 0.0, f"max |fused - mean(sides)| = {worst:g}"


def _scale_plan() -> tuple[bool, str]:
    problems = []
    for s in (2, 4, 8, 16, 32):
        plan = model.plan_upsampling(s)
        if plan.n_sub2 != int(math.log2(s)) - 1 or plan.stages[-1:] != ("sub1",) or plan.stages.count("sub1") != 1:
            problems.append(f"scale {s}: {plan.stages}")
    g = build_model(ModelConfig.toy(), seed=0)
    if tuple(p.scale for p in g.plans) != SIDE_SCALES:
        problems.append(f"side scales {[p.scale for p in g.plans]}")
    for h, w in ((16, 16), (37, 29)):
        out = forward(g, np.zeros((1, 3, h, w), np.float32))
        shapes = {m.shape for m in (*out.sides, out.fused, out.averaged)}
        if shapes != {(1, 1, h, w)}:
            problems.append(f"{h}x{w} input gave {sorted(shapes)}")
    return not problems, "; ".join(problems) or "stage law and output sizes hold"


def brute_force_matches(pred: np.ndarray, gt: np.ndarray, radius: float) -> int:
    """Largest one-to-one matching by trying every injection into in-range GT pixels; tiny inputs only."""
    ps, gs = np.argwhere(pred > 0), np.argwhere(gt > 0)
    near = [[j for j, q in enumerate(gs) if math.dist(p, q) <= radius] for p in ps]

    def best(i, used):
        if i == len(ps):
            return 0
        return max([best(i + 1, used)] + [1 + best(i + 1, used | {j}) for j in near[i] if j not in used])

    return best(0, frozenset())


def matcher_fixtures(n: int = 200, seed: int = 5):
    """8x8 pred/GT pairs with at most 6 edge pixels each, packed into a corner so matches compete."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        pair = []
        for _ in range(2):
            m = np.zeros((8, 8))
            cells = rng.choice(25, rng.integers(0, 7), replace=False)
            m[cells // 5, cells % 5] = 1
            pair.append(m)
        yield pair[0], pair[1], float(rng.choice([1.0, 1.5, 2.0, 3.0]))


def _matcher() -> tuple[bool, str]:
    results = [evaluation.match_edges(p, g, radius=r).tp == brute_force_matches(p, g, r)
               for p, g, r in matcher_fixtures()]
    return all(results), f"{sum(results)}/{len(results)} fixtures match brute force"


_CHECKS = {"gradients": _gradients, "fusion_init": _fusion_init, "scale_plan": _scale_plan, "matcher": _matcher}


# ---------------------------------------------------------------------------
# deliberate faults, one per group, to show each group can fail

def _bad_relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return ad.record("relu", (x,), out, lambda g: (np.where(mask, 1.1 * g, 0),))


def _bad_plan(scale):
    plan = plan_upsampling(scale)
    return model.ScalePlan(plan.scale, ("sub2",) + plan.stages)


_real_build = model.build_model


def _bad_build(config=None, seed=0):
    g = _real_build(config, seed)
    k = g.params["fuse/kernel"]
    k.data = np.nextafter(k.data, np.inf, dtype=k.data.dtype)
    return g


def _greedy_counts(pred_xy, gt_xy, radius):
    used = set()
    tp = 0
    for p in pred_xy:
        for j, q in enumerate(gt_xy):
            if j not in used and math.dist(p, q) <= radius:
                used.add(j)
                tp += 1
                break
    return tp


def _perturbation(group: str):
    return {
        "gradients": [mock.patch.object(ad, "relu", _bad_relu), mock.patch.object(model.ad, "relu", _bad_relu)],
        "fusion_init": [mock.patch(f"{__name__}.build_model", _bad_build)],
        "scale_plan": [mock.patch.object(model, "plan_upsampling", _bad_plan)],
        "matcher": [mock.patch.object(evaluation, "match_counts", _greedy_counts)],
    }[group]


def run_selfcheck(groups=None, perturb=()) -> list[GroupResult]:
    groups = list(groups or GROUPS)
    unknown = [g for g in (*groups, *perturb) if g not in GROUPS]
    if unknown:
        raise ValueError(f"unknown selfcheck group(s): {', '.join(unknown)}")
    results = []
    for name in groups:
        t0 = time.perf_counter()
        with ExitStack() as stack:
            if name in perturb:
                for p in _perturbation(name):
                    stack.enter_context(p)
            try:
                ok, detail = _CHECKS[name]()
            except Exception as exc:  # a crash is a failed group, not a crashed command
                ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(GroupResult(name, ok, detail, time.perf_counter() - t0))
    return results
