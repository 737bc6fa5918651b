"""Train the default desk model once and sweep perturbation severities."""

import argparse
import json
from pathlib import Path

from gendf.config import load_config
from gendf.harness import datasets_for, evaluate, train
from gendf.synthbench import PerturbationSpec

SWEEP = {
    "contrast": [1.25, 1.5, 2.0],
    "saturation": [0.0, 2.0, 4.0],
    "pixelate": [2, 4],
    "blur": [0.5, 1.0, 2.0],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--out", default="results/robustness.json")
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    model = train(cfg).model
    eval_set = datasets_for(cfg)[1]
    clean = evaluate(model, eval_set, cfg=cfg).auc
    rows = [{"perturbation": "clean", "auc": clean, "delta": 0.0}]
    for kind, severities in SWEEP.items():
        for sev in severities:
            a = evaluate(model, eval_set, PerturbationSpec(kind, float(sev)), cfg).auc
            rows.append({"perturbation": f"{kind}:{sev:g}", "auc": a, "delta": a - clean})
    for r in rows:
        print(f"{r['perturbation']:16s} auc={r['auc']:.4f}  delta={r['delta']:+.4f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps({"config_digest": cfg.digest(), "rows": rows}, indent=2) + "\n")


if __name__ == "__main__":
    main()
