"""Pin the separation threshold: components grid, 5 seeds, default desk config.

Writes results/calibration.json with every run's held-out AUC and the
per-variant medians.
"""

import argparse
import json
import time
from pathlib import Path

from gendf.config import RunConfig
from gendf.harness import ablate, median_auc

THRESHOLD = 0.95


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "results" / "calibration.json"))
    args = ap.parse_args()

    base = RunConfig()
    t0 = time.perf_counter()
    rows = ablate(base, "components", seeds=range(args.seeds))
    elapsed = time.perf_counter() - t0
    medians = median_auc(rows)
    for r in rows:
        print(f"{r.variant:14s} seed={r.seed}  auc={r.record.auc:.4f}")
    print("medians:", {k: round(v, 4) for k, v in medians.items()})
    out = {
        "config_digest": base.digest(),
        "threshold": THRESHOLD,
        "seeds": list(range(args.seeds)),
        "runs": [{"variant": r.variant, "seed": r.seed, "trainable": r.trainable, "auc": r.record.auc}
                 for r in rows],
        "median_auc": medians,
        "elapsed_s": round(elapsed, 1),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")


if __name__ == "__main__":
    main()
