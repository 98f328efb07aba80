"""Write a synthetic polygon dataset in the BIPED directory layout.

    python scripts/make_synthetic.py --out data/synth --n 4 --size 256 --split train
"""

import argparse
from pathlib import Path

from dexined.pngio import edge_to_uint8, write_png
from dexined.synthetic import polygon_scene


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    root = Path(a.out)
    for i in range(a.n):
        img, edge = polygon_scene(a.size, seed=a.seed * 1000 + i)
        write_png(root / "imgs" / a.split / f"synth{i:03d}.png", img)
        write_png(root / "edge_maps" / a.split / f"synth{i:03d}.png", edge_to_uint8(edge))
    print(f"{a.n} pairs written to {root}")


if __name__ == "__main__":
    main()
