"""Overfit the toy model on two synthetic 400x400 polygon images.

    python scripts/run_overfit.py --out runs/overfit [--variant dc] [--iterations 2000]

Writes the loss log, checkpoints, fused predictions and an evaluation summary,
then prints the loss ratio (median of the last 200 iterations over the median
of iterations 1-10) and ODS on the training pair.
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from dexined.evaluation import evaluate_dataset, write_results
from dexined.model import ModelConfig, build_model, forward, image_to_input
from dexined.pngio import edge_to_uint8, prob_to_uint8, write_png
from dexined.synthetic import polygon_dataset
from dexined.training import EdgeDataset, TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--variant", default="dc", choices=["bdc", "dc", "sp"])
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(a.out)
    images, edges = polygon_dataset(2, a.size, seed=a.seed)
    for i, (im, e) in enumerate(zip(images, edges)):
        write_png(out / "data" / f"img{i}.png", im)
        write_png(out / "data" / f"gt{i}.png", edge_to_uint8(e))

    graph = build_model(ModelConfig.toy(variant=a.variant), seed=a.seed)
    cfg = TrainConfig.toy(crop_size=a.size, max_iterations=a.iterations, seed=a.seed)
    result = train(graph, EdgeDataset(images, edges), cfg, out)

    probs = [forward(graph, image_to_input(im)).fused_prob()[0, 0] for im in images]
    for i, pr in enumerate(probs):
        write_png(out / "pred" / f"img{i}.png", prob_to_uint8(pr))
    summary = evaluate_dataset(probs, edges)
    write_results(summary, out / "eval")

    loss = np.array([r[1] for r in result.rows])
    initial, final = float(np.median(loss[:10])), float(np.median(loss[-200:]))
    report = {"initial": initial, "final": final, "ratio": final / initial, "ods": summary.ods,
              "ois": summary.ois, "ap": summary.ap, "variant": a.variant, "iterations": a.iterations}
    (out / "overfit.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"loss {initial:.0f} -> {final:.0f} (ratio {final / initial:.3f}); {summary.line()}")


if __name__ == "__main__":
    main()
