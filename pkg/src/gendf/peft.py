"""Low-rank attention updates, the bottleneck adapter baseline, and parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import binio
from . import tensor as T
from .backbone import TARGETS, BackboneConfig
from .errors import ConfigError
from .tensor import Tensor

DEFAULT_TARGETS = ("Q", "V")


@dataclass
class LoraPair:
    """Trainable factors of ``delta W = B @ A``; ``delta(x) = scale * x A^T B^T``."""

    B: Tensor
    A: Tensor
    rank: int
    scale: float

    def delta(self, x: Tensor) -> Tensor:
        return lora_delta(self, x)

    def params(self) -> list[Tensor]:
        return [self.A, self.B]


def lora_init(dim: int, rank: int, scale: float = 4.0, sigma: float = 0.01, seed=0) -> LoraPair:
    if not 0 < rank < dim:
        raise ConfigError(f"LoRA rank must satisfy 0 < r < D, got r={rank}, D={dim}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    A = Tensor(rng.normal(0.0, sigma, size=(rank, dim)), requires_grad=True, name="lora_A")
    B = Tensor(np.zeros((dim, rank)), requires_grad=True, name="lora_B")
    return LoraPair(B=B, A=A, rank=rank, scale=float(scale))


def lora_delta(pair: LoraPair, x: Tensor) -> Tensor:
    dim = pair.A.shape[1]
    if x.shape[-1] != dim:
        raise T.ShapeError(f"lora_delta: feature size {x.shape[-1]} does not match D={dim}")
    low = T.matmul(x, T.transpose(pair.A, None))
    return T.matmul(low, T.transpose(pair.B, None)) * pair.scale


@dataclass
class AdapterWeights:
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return adapter_forward(self, x)

    def params(self) -> list[Tensor]:
        return [self.w_down, self.b_down, self.w_up, self.b_up]

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[0]


def adapter_init(dim: int, bottleneck: int = 64, sigma: float = 0.01, seed=0) -> AdapterWeights:
    """Down-projection drawn from N(0, sigma^2); up-projection zero so the adapter starts as identity."""
    if not 0 < bottleneck < dim:
        raise ConfigError(f"adapter bottleneck must satisfy 0 < d' < D, got {bottleneck}, D={dim}")
    rng = np.random.default_rng(seed)
    return AdapterWeights(
        w_down=Tensor(rng.normal(0.0, sigma, size=(bottleneck, dim)), True, "adapter_down"),
        b_down=Tensor(np.zeros(bottleneck), True, "adapter_down_b"),
        w_up=Tensor(np.zeros((dim, bottleneck)), True, "adapter_up"),
        b_up=Tensor(np.zeros(dim), True, "adapter_up_b"),
    )


def adapter_forward(w: AdapterWeights, x: Tensor) -> Tensor:
    if x.shape[-1] != w.w_down.shape[1]:
        raise T.ShapeError(f"adapter: feature size {x.shape[-1]} does not match {w.w_down.shape[1]}")
    hidden = T.gelu(T.linear(x, w.w_down, w.b_down))
    return x + T.linear(hidden, w.w_up, w.b_up)


@dataclass
class PeftPlan:
    targets: tuple[str, ...] = DEFAULT_TARGETS
    rank: int = 8
    scale: float = 4.0
    pairs: dict[tuple[int, str], LoraPair] = field(default_factory=dict)

    def __post_init__(self):
        self.targets = normalize_targets(self.targets)

    def params(self) -> list[Tensor]:
        out = []
        for key in sorted(self.pairs, key=_pair_order):
            out.extend(self.pairs[key].params())
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for blk, tgt in sorted(self.pairs, key=_pair_order):
            pair = self.pairs[(blk, tgt)]
            out.append((f"lora.{blk}.{tgt}.A", pair.A))
            out.append((f"lora.{blk}.{tgt}.B", pair.B))
        return out


def _pair_order(key: tuple[int, str]) -> tuple[int, int]:
    return key[0], TARGETS.index(key[1])


def normalize_targets(targets) -> tuple[str, ...]:
    if isinstance(targets, str):
        targets = tuple(targets.replace(",", "").upper())
    out = tuple(t for t in TARGETS if t in set(targets))
    unknown = set(targets) - set(TARGETS)
    if unknown:
        raise ConfigError(f"unknown LoRA targets {sorted(unknown)}; expected a subset of Q, K, V")
    return out


def build_plan(
    cfg: BackboneConfig,
    targets=DEFAULT_TARGETS,
    rank: int = 8,
    scale: float = 4.0,
    sigma: float = 0.01,
    seed: int = 0,
) -> PeftPlan:
    """One independently seeded pair per (block, target)."""
    plan = PeftPlan(targets=targets, rank=rank, scale=scale)
    seeds = np.random.SeedSequence(seed).spawn(cfg.num_blocks * len(TARGETS))
    for blk in range(cfg.num_blocks):
        for j, tgt in enumerate(TARGETS):
            if tgt in plan.targets:
                plan.pairs[(blk, tgt)] = lora_init(
                    cfg.embed_dim, rank, scale, sigma, seeds[blk * len(TARGETS) + j]
                )
    return plan


def build_adapters(cfg: BackboneConfig, bottleneck: int = 64, sigma: float = 0.01, seed: int = 0):
    seeds = np.random.SeedSequence(seed).spawn(2 * cfg.num_blocks)
    out = {}
    for blk in range(cfg.num_blocks):
        for j, site in enumerate(("attn", "mlp")):
            out[(blk, site)] = adapter_init(cfg.embed_dim, bottleneck, sigma, seeds[2 * blk + j])
    return out


def lora_param_count(cfg: BackboneConfig, targets, rank: int) -> int:
    return len(normalize_targets(targets)) * cfg.num_blocks * 2 * cfg.embed_dim * rank


def adapter_param_count(cfg: BackboneConfig, bottleneck: int) -> int:
    D, d = cfg.embed_dim, bottleneck
    return 2 * cfg.num_blocks * (D * d + d + d * D + D)


def head_param_count(cfg: BackboneConfig, classes: int = 2) -> int:
    return cfg.embed_dim * classes + classes


def fsr_param_count(cfg: BackboneConfig) -> int:
    return 2 * cfg.embed_dim


def count_trainable_params(
    plan: PeftPlan | AdapterWeights | int | None,
    cfg: BackboneConfig,
    include_head: bool = False,
    include_fsr: bool = False,
) -> int:
    """Analytic trainable-parameter count for a model shape.

    ``plan`` is a :class:`PeftPlan` (its targets and rank are used), an
    :class:`AdapterWeights` or an int bottleneck width for the adapter
    baseline, or ``None`` for no backbone adaptation.
    """
    if isinstance(plan, PeftPlan):
        total = lora_param_count(cfg, plan.targets, plan.rank)
    elif isinstance(plan, AdapterWeights):
        total = adapter_param_count(cfg, plan.bottleneck)
    elif isinstance(plan, (int, np.integer)) and not isinstance(plan, bool):
        total = adapter_param_count(cfg, int(plan))
    elif plan is None:
        total = 0
    else:
        raise TypeError(f"unsupported plan type {type(plan).__name__}")
    if include_head:
        total += head_param_count(cfg)
    if include_fsr:
        total += fsr_param_count(cfg)
    return total


# -- persistence -----------------------------------------------------------

_KIND_LORA, _KIND_ADAPTER = 1, 2


def write_peft(f: BinaryIO, plan: PeftPlan | None, adapters: dict | None = None) -> None:
    binio.write_tag(f, "PEFT")
    if plan is not None:
        mask = sum(1 << TARGETS.index(t) for t in plan.targets)
        keys = sorted(plan.pairs, key=_pair_order)
        binio.write_i32(f, _KIND_LORA, plan.rank, mask, len(keys))
        binio.write_f64(f, plan.scale)
        for blk, tgt in keys:
            binio.write_i32(f, blk, TARGETS.index(tgt))
            pair = plan.pairs[(blk, tgt)]
            binio.write_array(f, pair.B.data)
            binio.write_array(f, pair.A.data)
    if adapters:
        keys = sorted(adapters, key=lambda k: (k[0], k[1] != "attn"))
        binio.write_i32(f, _KIND_ADAPTER, 0, 0, len(keys))
        for blk, site in keys:
            binio.write_i32(f, blk, 0 if site == "attn" else 1)
            for t in adapters[(blk, site)].params():
                binio.write_array(f, t.data)
    binio.write_i32(f, 0, 0, 0, 0)


def read_peft(f: BinaryIO) -> tuple[PeftPlan | None, dict | None]:
    """Read a PEFT section body (the tag has already been consumed)."""
    plan, adapters = None, None
    while True:
        kind, rank, mask, count = binio.read_i32(f, 4)
        if kind == 0:
            return plan, adapters
        if kind == _KIND_LORA:
            (scale,) = binio.read_f64(f)
            targets = tuple(t for i, t in enumerate(TARGETS) if mask & (1 << i))
            plan = PeftPlan(targets=targets, rank=rank, scale=scale)
            for _ in range(count):
                blk, ti = binio.read_i32(f, 2)
                B = Tensor(binio.read_array(f), True, "lora_B")
                A = Tensor(binio.read_array(f), True, "lora_A")
                plan.pairs[(blk, TARGETS[ti])] = LoraPair(B=B, A=A, rank=rank, scale=scale)
        elif kind == _KIND_ADAPTER:
            adapters = {}
            for _ in range(count):
                blk, site = binio.read_i32(f, 2)
                parts = [Tensor(binio.read_array(f), True) for _ in range(4)]
                adapters[(blk, "attn" if site == 0 else "mlp")] = AdapterWeights(*parts)
        else:
            raise ValueError(f"unknown PEFT record kind {kind}")
