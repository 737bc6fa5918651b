"""Command-line entry point.

Every subcommand shares ``--config FILE`` (flat ``key = value``), repeated
``--set key=value`` overrides and ``GENDF_SEED``. Metrics go to a JSON-lines
file, a summary table to stdout. Failures print one JSON error line to stderr
and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, DegenerateError
from .harness import (
    GRIDS,
    MetricsRecord,
    TrainingError,
    ablate,
    datasets_for,
    evaluate,
    export_features,
    gradcheck,
    median_auc,
    perturbation_spec,
    train,
)
from .model import build_model, load_model, save_model
from .synthbench import PERTURBATIONS, Dataset, dataset_digest, read_dataset, write_dataset, write_manifest

GRADCHECK_TOL = 1e-4


class CliError(RuntimeError):
    pass


# -- helpers ---------------------------------------------------------------


def _write_jsonl(path: Path | None, records, timing: bool) -> None:
    lines = "".join(r.to_json(timing) + "\n" for r in records)
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(headers: list[str], rows: list[list]) -> str:
    cells = [headers] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    out = []
    for n, row in enumerate(cells):
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


def _record_rows(records: list[MetricsRecord]) -> list[list]:
    return [[r.split, r.step, r.perturbation or "clean", r.acc, r.auc, r.eer,
             r.losses.get("total") if r.losses else None] for r in records]


RECORD_HEADERS = ["split", "step", "perturbation", "acc", "auc", "eer", "loss"]


def _load_split(data_dir: Path, name: str) -> Dataset:
    path = data_dir / f"{name}.bin"
    if not path.exists():
        raise CliError(f"missing dataset file {path}")
    ds = read_dataset(path)
    manifest = data_dir / "manifest.json"
    if manifest.exists():
        expected = json.loads(manifest.read_text())["splits"].get(name, {}).get("sha256")
        if expected and expected != dataset_digest(ds):
            raise CliError(f"{path}: digest does not match manifest.json")
    return ds


def _datasets(cfg: RunConfig, data_dir: str | None) -> tuple[Dataset, Dataset]:
    if data_dir is None:
        return datasets_for(cfg)
    d = Path(data_dir)
    return _load_split(d, "train"), _load_split(d, "eval")


def _kinds(cfg: RunConfig, flag: str | None) -> list[str]:
    if flag is not None:
        cfg = cfg.replace(perturbations=flag)
    kinds = cfg.perturbation_list()
    for k in kinds:
        if k not in PERTURBATIONS:
            raise ConfigError(f"unknown perturbation {k!r}; expected one of {PERTURBATIONS}")
    return kinds


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = datasets_for(cfg)
    write_dataset(out / "train.bin", train_set)
    write_dataset(out / "eval.bin", eval_set)
    man = write_manifest(out / "manifest.json", {"train": train_set, "eval": eval_set},
                         {"config_digest": cfg.digest()})
    rows = [[name, s["count"], s["fake"], s["sha256"][:16]] for name, s in man["splits"].items()]
    print(_table(["split", "count", "fake", "sha256"], rows))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = _datasets(cfg, args.data)
    result = train(cfg, train_set, eval_set)
    save_model(out / "model.bin", result.model, cfg)
    (out / "config.txt").write_text(dump_config(cfg))
    records = result.records
    for kind in _kinds(cfg, args.perturb):
        rec = evaluate(result.model, eval_set, perturbation_spec(cfg, kind), cfg)
        rec.step = cfg.steps
        records.append(rec)
    _write_jsonl(Path(args.metrics) if args.metrics else out / "metrics.jsonl", records, cfg.timing)
    print(_table(RECORD_HEADERS, _record_rows(records)))
    print(f"trainable parameters: {result.model.num_trainable()}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.model:
        model, saved = load_model(args.model)
        if saved is not None and not args.config and not args.set:
            cfg = saved
    else:
        model = build_model(cfg)
    _, eval_set = _datasets(cfg, args.data)
    records = [evaluate(model, eval_set, None, cfg)]
    for kind in _kinds(cfg, args.perturb):
        records.append(evaluate(model, eval_set, perturbation_spec(cfg, kind), cfg))
    _write_jsonl(Path(args.metrics) if args.metrics else None, records, cfg.timing)
    if not args.metrics:
        for r in records:
            print(r.to_json(cfg.timing))
    clean = records[0].auc
    rows = _record_rows(records)
    for row, rec in zip(rows, records):
        row.append(None if clean is None or rec.auc is None else rec.auc - clean)
    print(_table(RECORD_HEADERS + ["d_auc"], rows))
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [None]
    rows = ablate(cfg, args.grid, seeds)
    records = [r.record for r in rows]
    _write_jsonl(Path(args.metrics) if args.metrics else Path(args.out) / f"ablate-{args.grid}.jsonl",
                 records, cfg.timing)
    medians = median_auc(rows)
    counts = {r.variant: r.trainable for r in rows}
    table = [[name, counts[name], sum(1 for r in rows if r.variant == name), med]
             for name, med in medians.items()]
    print(_table(["variant", "trainable", "runs", "median_auc"], table))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    report = gradcheck(cfg, h=args.h)
    print(json.dumps({"gradcheck": report, "tolerance": GRADCHECK_TOL}, sort_keys=True))
    rows = [[group, err, "ok" if err < GRADCHECK_TOL else "FAIL"] for group, err in report.items()]
    print(_table(["group", "max_rel_err", "status"], rows))
    bad = [g for g, e in report.items() if not e < GRADCHECK_TOL]
    if bad:
        raise CliError(f"gradient check failed for {', '.join(bad)}")
    return 0


def cmd_export_features(args, cfg: RunConfig) -> int:
    if args.model:
        model, saved = load_model(args.model)
        if saved is not None and not args.config and not args.set:
            cfg = saved
    else:
        model = build_model(cfg)
    train_set, eval_set = _datasets(cfg, args.data)
    ds = eval_set if args.split == "eval" else train_set
    feats = export_features(model, ds, args.out)
    print(_table(["path", "rows", "dim", "fake"], [[args.out, feats.shape[0], feats.shape[1], int(ds.labels.sum())]]))
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gendf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic train/eval splits")
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and evaluate one configuration")
    p.add_argument("--out", default="runs/train")
    p.add_argument("--data", help="directory written by gen-data (default: regenerate from seeds)")
    p.add_argument("--metrics", help="JSON-lines output (default: OUT/metrics.jsonl)")
    p.add_argument("--perturb", help="comma list, 'all' or 'none'; defaults to the perturbations key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved model, optionally under perturbations")
    p.add_argument("--model", help="model file from train (default: untrained model of the config)")
    p.add_argument("--data")
    p.add_argument("--metrics", help="JSON-lines output (default: stdout)")
    p.add_argument("--perturb", help="comma list, 'all' or 'none'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train every variant of an ablation grid")
    p.add_argument("--grid", required=True, choices=sorted(GRIDS))
    p.add_argument("--seeds", help="comma-separated master seeds (default: the config seed)")
    p.add_argument("--out", default="runs")
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every trainable group")
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-features", parents=[common], help="dump pooled features and labels")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def _error_line(exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True)


EXIT_CODES = {ConfigError: 2, CliError: 3, DegenerateError: 4, TrainingError: 5}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except (ConfigError, CliError, DegenerateError, TrainingError, OSError, ValueError) as exc:
        print(_error_line(exc), file=sys.stderr)
        for kind, code in EXIT_CODES.items():
            if isinstance(exc, kind):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
