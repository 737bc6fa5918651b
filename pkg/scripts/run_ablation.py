"""Train every variant of one ablation grid over several seeds and print medians."""

import argparse
from pathlib import Path

from gendf.config import load_config
from gendf.harness import GRIDS, ablate, median_auc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("grid", choices=sorted(GRIDS))
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    base = load_config(args.config, args.set)
    if args.grid == "rank" and base.embed_dim <= 64:
        base = base.replace(embed_dim=128)
        print("rank grid: embed_dim raised to 128 so r=64 is a proper low-rank update")
    rows = ablate(base, args.grid, seeds=range(args.seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"ablation-{args.grid}.jsonl", "w") as f:
        for r in rows:
            f.write(r.record.to_json() + "\n")
    counts = {r.variant: r.trainable for r in rows}
    print(f"{'variant':16s} {'trainable':>9s} {'median_auc':>10s}")
    for name, med in median_auc(rows).items():
        print(f"{name:16s} {counts[name]:9d} {med:10.4f}")


if __name__ == "__main__":
    main()
