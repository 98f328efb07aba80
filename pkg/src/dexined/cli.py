"""Batch command line: augment, train, predict, eval, selfcheck.

Exit codes: 0 ok, 1 I/O, 2 config or usage, 3 numerical failure, 4 selfcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from PIL import UnidentifiedImageError

from .checkpoint import CheckpointError, load_checkpoint
from .data import AugmentConfig, DataError, DatasetIndex, augment_dataset, load_training_set
from .evaluation import MatchConfig, align, evaluate_dataset, ingest_gt, ingest_predictions, write_results
from .model import ConfigError, ModelConfig, build_model, forward, image_to_input
from .pngio import prob_to_uint8, read_rgb, write_png
from .selfcheck import GROUPS, run_selfcheck
from .supervision import SupervisionConfig
from .training import NumericalError, TrainConfig, TrainingError, latest_checkpoint, resume, train

log = logging.getLogger("dexined")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERICAL, EXIT_SELFCHECK = 0, 1, 2, 3, 4
SEED_ENV = "DEXINED_SEED"
MAP_NAMES = [f"out{i}" for i in range(1, 7)] + ["fused", "avg"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "augment": AugmentConfig,
             "match": MatchConfig, "supervision": SupervisionConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    seed: int = 0

    @classmethod
    def resolve(cls, path=None, base: "RunConfig | None" = None, overrides: dict | None = None,
                seed: int | None = None) -> "RunConfig":
        """Defaults, then the JSON file, then command-line overrides (``{section: {key: value}}``).

        The seed comes from ``--seed``, else the file, else ``DEXINED_SEED``, else 0.
        """
        cfg = base or cls()
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: top level must be an object")
        file_seed = doc.pop("seed", None)
        unknown = sorted(set(doc) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        for layer in (doc, overrides or {}):
            for name, values in layer.items():
                section = getattr(cfg, name)
                known = {f.name for f in fields(section)}
                bad = sorted(set(values) - known)
                if bad:
                    raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(bad)}")
                if "seed" in values and file_seed is None:
                    file_seed = values["seed"]
                try:
                    setattr(cfg, name, replace(section, **values))
                except TypeError as exc:
                    raise ConfigError(f"[{name}]: {exc}") from exc
        if seed is None:
            seed = file_seed
        if seed is None and os.environ.get(SEED_ENV):
            try:
                seed = int(os.environ[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer") from exc
        cfg.seed = int(seed or 0)
        cfg.train = replace(cfg.train, seed=cfg.seed)
        cfg.augment = replace(cfg.augment, seed=cfg.seed)
        return cfg

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        d["model"] = self.model.to_dict()
        d["seed"] = self.seed
        return d


def write_resolved(out_dir, cfg: RunConfig, command: str, args: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "arguments": args, **cfg.to_dict()}
    path = out / "config_resolved.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_augment(a) -> int:
    overrides = {"augment": {k: False for k in ("split", "rotate", "flip", "gamma") if getattr(a, f"no_{k}")}}
    cfg = RunConfig.resolve(a.config, overrides=overrides, seed=a.seed)
    index = DatasetIndex.scan(a.input, a.split)
    write_resolved(a.output, cfg, "augment", {"input": a.input, "output": a.output, "split": a.split})
    res = augment_dataset(index, a.output, cfg.augment)
    msg = f"{len(res)} pairs written from {len(index)} source image(s)"
    if res.skipped:
        msg += f", {len(res.skipped)} degenerate variant(s) skipped"
    print(msg)
    return EXIT_OK


def cmd_train(a) -> int:
    base = RunConfig(model=ModelConfig.toy(), train=TrainConfig.toy()) if a.toy else RunConfig()
    overrides = {"model": {"variant": a.variant} if a.variant else {}, "train": {}}
    if a.iterations is not None:
        overrides["train"]["max_iterations"] = a.iterations
    cfg = RunConfig.resolve(a.config, base=base, overrides=overrides, seed=a.seed)
    ckpt = None
    if a.resume is not None:
        ckpt = latest_checkpoint(a.out) if a.resume == "latest" else Path(a.resume)
        if ckpt is None or not ckpt.is_file():
            raise UsageError(f"no checkpoint to resume from ({ckpt or Path(a.out) / 'checkpoints'})")
    data = load_training_set(a.data, a.split)
    write_resolved(a.out, cfg, "train", {"data": a.data, "out": a.out, "split": a.split,
                                         "resume": str(ckpt) if ckpt else None})
    if ckpt is not None:
        _, result = resume(ckpt, data, cfg.train, a.out, cfg.supervision)
    else:
        graph = build_model(cfg.model, seed=cfg.seed)
        result = train(graph, data, cfg.train, a.out, cfg.supervision)
    last = result.rows[-1][1] if result.rows else float("nan")
    print(f"trained to step {result.last_step}, final loss {last:.4f}, "
          f"{len(result.checkpoints)} checkpoint(s) in {Path(a.out) / 'checkpoints'}")
    return EXIT_OK


def cmd_predict(a) -> int:
    graph, _, step, _ = load_checkpoint(a.checkpoint)
    src = Path(a.input)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory not found: {src}")
    cfg = RunConfig(model=graph.config)
    write_resolved(a.output, cfg, "predict", {"checkpoint": a.checkpoint, "input": a.input,
                                              "output": a.output, "maps": a.maps, "step": step})
    n = 0
    for path in sorted(p for p in src.iterdir() if p.is_file()):
        try:
            rgb = read_rgb(path)
        except (UnidentifiedImageError, OSError):
            log.warning("skipping %s: not a readable image", path.name)
            continue
        maps = forward(graph, image_to_input(rgb, graph.dtype)).all_probs()
        if a.maps == "all":
            for name in MAP_NAMES:
                write_png(Path(a.output) / path.stem / f"{name}.png", prob_to_uint8(maps[name][0, 0]))
        else:
            write_png(Path(a.output) / f"{path.stem}.png", prob_to_uint8(maps[a.maps][0, 0]))
        n += 1
    print(f"{n} image(s) predicted")
    return EXIT_OK


def cmd_eval(a) -> int:
    overrides = {"match": {}}
    if a.tolerance is not None:
        overrides["match"]["max_dist"] = a.tolerance
    if a.thresholds is not None:
        overrides["match"]["n_thresholds"] = a.thresholds
    if a.no_thin:
        overrides["match"]["thin"] = False
    cfg = RunConfig.resolve(a.config, overrides=overrides, seed=a.seed)
    names, preds, gts = align(ingest_predictions(a.pred, a.map), ingest_gt(a.gt, a.layout, a.split))
    write_resolved(a.out, cfg, "eval", {"pred": a.pred, "gt": a.gt, "out": a.out, "layout": a.layout,
                                        "split": a.split, "map": a.map})
    summary = evaluate_dataset(preds, [g >= 0.5 for g in gts], cfg.match, names)
    write_results(summary, a.out)
    print(summary.line())
    return EXIT_OK


def cmd_selfcheck(a) -> int:
    results = run_selfcheck(a.group or None, perturb=a.perturb or ())
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dexined", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with model/train/augment/match/supervision sections")
        sp.add_argument("--seed", type=int, help=f"overrides the config file and ${SEED_ENV}")

    sp = sub.add_parser("augment", help="expand a dataset with split/rotate/flip/gamma variants")
    sp.add_argument("--input", required=True, help="root holding imgs/<split>/ and edge_maps/<split>/")
    sp.add_argument("--output", required=True)
    sp.add_argument("--split", default="train")
    for k in ("split", "rotate", "flip", "gamma"):
        sp.add_argument(f"--no-{k}", action="store_true", dest=f"no_{k}")
    common(sp)
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("train", help="train from scratch or resume")
    sp.add_argument("--data", required=True, help="root holding imgs/<split>/ and edge_maps/<split>/")
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--variant", choices=["bdc", "dc", "sp"])
    sp.add_argument("--toy", action="store_true", help="width x1/8 and a 2000-iteration schedule")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", nargs="?", const="latest", metavar="CHECKPOINT",
                    help="checkpoint file, or the newest one under --out when no path is given")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="write 8-bit edge maps for every image in a directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--maps", choices=["all", "fused", "avg"], default="fused")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="ODS / OIS / AP of predicted maps against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tolerance", type=float, help="match distance as a fraction of the image diagonal")
    sp.add_argument("--thresholds", type=int)
    sp.add_argument("--layout", choices=["flat", "biped"], default="flat")
    sp.add_argument("--split", default="test")
    sp.add_argument("--map", default="fused", help="map file read from per-image prediction folders")
    sp.add_argument("--no-thin", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("selfcheck", help="fast invariant suite")
    sp.add_argument("--group", action="append", choices=GROUPS)
    sp.add_argument("--perturb", action="append", choices=GROUPS, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, DataError, TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
