"""Training loop, evaluation, ablation grids, gradient checking and feature export."""

from __future__ import annotations

import functools
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateError
from .config import RunConfig
from .model import GenDF, build_model, compute_losses
from .optim import AdamW
from .synthbench import (
    Dataset,
    PerturbationSpec,
    ScoreSet,
    accuracy,
    auc,
    eer,
    make_dataset,
    perturb_batch,
)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

EVAL_OFFSET = 5_000_000
SPLIT_STRIDE = 10_000_000


class TrainingError(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    step: int
    split: str
    acc: float | None = None
    auc: float | None = None
    eer: float | None = None
    losses: dict = field(default_factory=dict)
    wall_ms: float | None = None
    config_digest: str = ""
    variant: str | None = None
    perturbation: str | None = None

    def to_json(self, timing: bool = False) -> str:
        d = asdict(self)
        if not timing:
            d.pop("wall_ms")
        d = {k: v for k, v in d.items() if v is not None and v != {}}
        return json.dumps(d, sort_keys=True, allow_nan=False)


@functools.lru_cache(maxsize=16)
def _cached_dataset(count: int, base: int, size: int) -> Dataset:
    return make_dataset(count, base, size, size)


def datasets_for(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    base = cfg.seeds()["data"] * SPLIT_STRIDE
    return (
        _cached_dataset(cfg.n_train, base, cfg.image_size),
        _cached_dataset(cfg.n_eval, base + EVAL_OFFSET, cfg.image_size),
    )


@dataclass
class TrainResult:
    model: GenDF
    records: list[MetricsRecord]
    frozen_digest: str
    grad_seen: dict[str, bool]


def _batches(n: int, size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - size + 1, size):
            yield order[i:i + size]


def train(cfg: RunConfig, train_set: Dataset | None = None, eval_set: Dataset | None = None,
          model: GenDF | None = None) -> TrainResult:
    """Optimise the trainable set with AdamW; evaluate on the held-out split at the end."""
    if train_set is None or eval_set is None:
        default_train, default_eval = datasets_for(cfg)
        train_set = default_train if train_set is None else train_set
        eval_set = default_eval if eval_set is None else eval_set
    if len(np.unique(train_set.labels)) < 2:
        raise DegenerateError("training set needs both classes")
    if cfg.batch_size > len(train_set):
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds training set size {len(train_set)}")
    model = build_model(cfg) if model is None else model
    digest = model.backbone.digest()
    named = model.named_params()
    params = [t for _, t in named]
    opt = AdamW(params, cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    seeds = cfg.seeds()
    data_rng = np.random.default_rng([seeds["data"], 1])
    aug_rng = np.random.default_rng(seeds["aug"])
    aug_cfg = cfg.aug_config() if cfg.cifaug else None
    weights = cfg.loss_weights()
    grad_seen = {name: False for name, _ in named}
    records = []
    sums: dict[str, float] = {}
    count = 0
    t0 = time.perf_counter()
    batches = _batches(len(train_set), cfg.batch_size, data_rng)
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        opt.zero_grad()
        try:
            with Tape() as tape:
                terms = compute_losses(model, train_set.images[idx], train_set.labels[idx],
                                       weights, aug_cfg, aug_rng)
            vals = terms.values()
            for term, v in vals.items():
                if not math.isfinite(v):
                    raise TrainingError(f"step {step}: non-finite {term} loss")
            T.backward(terms.total, tape)
        except T.NonFiniteError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        for name, p in named:
            if p.grad is not None and np.any(p.grad):
                grad_seen[name] = True
        opt.step()
        for k, v in vals.items():
            sums[k] = sums.get(k, 0.0) + v
        count += 1
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps):
            records.append(MetricsRecord(
                step=step, split="train",
                losses={k: v / count for k, v in sorted(sums.items())},
                wall_ms=(time.perf_counter() - t0) * 1e3,
                config_digest=cfg.digest(),
            ))
            sums, count = {}, 0
    if model.backbone.digest() != digest:
        raise TrainingError("frozen backbone weights changed during training")
    final = evaluate(model, eval_set, cfg=cfg)
    final.step = cfg.steps
    records.append(final)
    return TrainResult(model, records, digest, grad_seen)


def perturbation_spec(cfg: RunConfig, kind: str) -> PerturbationSpec:
    return PerturbationSpec(kind, float(getattr(cfg, kind)))


def evaluate(model: GenDF, dataset: Dataset, perturbation: PerturbationSpec | None = None,
             cfg: RunConfig | None = None) -> MetricsRecord:
    """Frame-level acc/AUC/EER with augmentation off; AUC/EER omitted for single-class sets."""
    t0 = time.perf_counter()
    images = perturb_batch(dataset.images, perturbation)
    scores = model.scores(images)
    s = ScoreSet(scores, dataset.labels)
    rec = MetricsRecord(step=0, split="eval", acc=accuracy(s),
                        config_digest=cfg.digest() if cfg is not None else "")
    try:
        rec.auc = auc(s)
        rec.eer = eer(s)
    except DegenerateError:
        pass
    if perturbation is not None:
        rec.perturbation = f"{perturbation.kind}:{perturbation.severity:g}"
    rec.wall_ms = (time.perf_counter() - t0) * 1e3
    return rec


def robustness(model: GenDF, dataset: Dataset, cfg: RunConfig, kinds=None) -> list[MetricsRecord]:
    kinds = kinds or ["contrast", "saturation", "pixelate", "blur"]
    out = [evaluate(model, dataset, None, cfg)]
    for kind in kinds:
        out.append(evaluate(model, dataset, perturbation_spec(cfg, kind), cfg))
    return out


# -- ablations -------------------------------------------------------------

GRIDS = {
    "components": [
        ("a_head_only", dict(dsrl=False, fsr=False, cifaug=False)),
        ("b_fsr_cifaug", dict(dsrl=False, fsr=True, cifaug=True)),
        ("c_dsrl_cifaug", dict(dsrl=True, fsr=False, cifaug=True)),
        ("d_dsrl_fsr", dict(dsrl=True, fsr=True, cifaug=False)),
        ("e_full", dict(dsrl=True, fsr=True, cifaug=True)),
    ],
    "qkv": [(t, dict(targets=t)) for t in ("Q", "K", "V", "QK", "KV", "QKV", "QV")],
    "rank": [(f"r{r}", dict(rank=r)) for r in (4, 8, 16, 64)],
    "fsr-vs-linear": [("linear", dict(redistribution="linear")), ("fsr", dict(redistribution="fsr"))],
    "dsrl-vs-adapter": [("adapter", dict(peft="adapter")), ("dsrl", dict(peft="lora"))],
}


@dataclass
class AblationRow:
    variant: str
    seed: int
    trainable: int
    record: MetricsRecord


def grid_variants(base: RunConfig, grid: str) -> list[tuple[str, RunConfig]]:
    if grid not in GRIDS:
        raise ConfigError(f"unknown grid {grid!r}; expected one of {sorted(GRIDS)}")
    out = []
    for name, changes in GRIDS[grid]:
        cfg = base.replace(**changes)
        if grid == "rank" and cfg.rank >= cfg.embed_dim:
            raise ConfigError(f"rank {cfg.rank} needs embed_dim > {cfg.rank}")
        out.append((name, cfg))
    return out


def ablate(base: RunConfig, grid: str, seeds=(None,)) -> list[AblationRow]:
    """Train every variant of ``grid`` from the same seeds; one row per (variant, seed)."""
    rows = []
    variants = grid_variants(base, grid)
    for seed in seeds:
        for name, cfg in variants:
            if seed is not None:
                cfg = cfg.replace(seed=seed)
            result = train(cfg)
            rec = result.records[-1]
            rec.variant = name
            rows.append(AblationRow(name, cfg.seed, result.model.num_trainable(), rec))
    return rows


def median_auc(rows: list[AblationRow]) -> dict[str, float]:
    out = {}
    for name in dict.fromkeys(r.variant for r in rows):
        out[name] = float(np.median([r.record.auc for r in rows if r.variant == name]))
    return out


# -- gradient check --------------------------------------------------------


def gradcheck(cfg: RunConfig, h: float = 1e-5, perturb_init: float = 0.5) -> dict[str, float]:
    """Max relative gradient error per trainable parameter group on a fixed 4-sample batch.

    LoRA B factors (and adapter up-projections) start at zero, which makes the
    A gradient identically zero, and at sigma=0.01 the B gradient sits near
    1e-8 where central-difference roundoff dominates. All LoRA and adapter
    tensors are redrawn from N(0, perturb_init^2) so every entry is well
    above that noise floor. Augmentation is forced on and replayed from
    the same seed at every evaluation.
    """
    model = build_model(cfg)
    rng = np.random.default_rng(cfg.seeds()["model"] + 7)
    for name, p in model.named_params():
        if name.startswith(("lora.", "adapter.")):
            p.data = rng.normal(0.0, perturb_init, size=p.shape)
    batch = make_dataset(4, cfg.seeds()["data"] * SPLIT_STRIDE + 9 * 10**6, cfg.image_size, cfg.image_size)
    aug = cfg.aug_config().__class__(cfg.aug_sigma, 1.0, cfg.seeds()["aug"]) if cfg.cifaug else None
    weights = cfg.loss_weights()

    def loss() -> Tensor:
        arng = np.random.default_rng(cfg.seeds()["aug"])
        return compute_losses(model, batch.images, batch.labels, weights, aug, arng).total

    named = model.named_params()
    errs = T.finite_difference_report(loss, [p for _, p in named], h)
    report: dict[str, float] = {}
    for (name, _), err in zip(named, errs):
        group = _group_name(name)
        report[group] = max(report.get(group, 0.0), err)
    return report


def _group_name(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "lora":
        return f"lora.{parts[-1]}"
    if parts[0] == "adapter":
        return f"adapter.{parts[-1]}"
    return name


# -- feature export --------------------------------------------------------

FEATURE_MAGIC = b"GDFEAT"


def export_features(model: GenDF, dataset: Dataset, path, batch_size: int = 64) -> np.ndarray:
    """Write pooled post-redistribution features.

    Layout: magic ``GDFEAT``, ``<II`` (N, D), N*D float64 row-major, N label bytes.
    """
    feats = [model.pooled(dataset.images[i:i + batch_size]).data
             for i in range(0, len(dataset), batch_size)]
    D = model.backbone.config.embed_dim
    arr = np.concatenate(feats) if feats else np.zeros((0, D))
    try:
        with open(path, "wb") as f:
            f.write(FEATURE_MAGIC)
            f.write(struct.pack("<II", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            f.write(dataset.labels.astype("<u1").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write features to {path}: {exc}") from exc
    return arr


def read_features(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:6] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature dump")
    n, d = struct.unpack_from("<II", raw, 6)
    off = 14
    feats = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<u1", count=n, offset=off + 8 * n * d).astype(np.int64)
    return feats, labels
