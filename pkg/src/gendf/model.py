"""Assembled detector: frozen backbone, optional PEFT, redistribution, and head."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import binio
from . import tensor as T
from .backbone import BackboneWeights, forward_backbone, init_backbone, pool_features, read_backbone, write_backbone
from .config import RunConfig
from .features import (
    AugmentationConfig,
    LabeledFeatures,
    LinearRedistribution,
    ModulationParams,
    cifaug_apply,
    fsr_apply,
    init_linear_redistribution,
    init_modulation,
)
from .objectives import (
    HeadWeights,
    LossWeights,
    augmentation_loss,
    classify,
    cross_entropy,
    init_head,
    total_loss,
    weighted_triplet,
)
from .peft import PeftPlan, build_adapters, build_plan, read_peft, write_peft
from .tensor import Tensor


@dataclass
class GenDF:
    backbone: BackboneWeights
    head: HeadWeights
    plan: PeftPlan | None = None
    adapters: dict | None = None
    fsr: ModulationParams | None = None
    linear: LinearRedistribution | None = None

    def named_params(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in a fixed order."""
        out = []
        if self.plan is not None:
            out.extend(self.plan.named_params())
        if self.adapters:
            for (blk, site), ad in sorted(self.adapters.items(), key=lambda kv: (kv[0][0], kv[0][1] != "attn")):
                for nm, t in zip(("down", "down_b", "up", "up_b"), ad.params()):
                    out.append((f"adapter.{blk}.{site}.{nm}", t))
        if self.fsr is not None:
            out += [("fsr.theta", self.fsr.theta), ("fsr.eps", self.fsr.eps)]
        if self.linear is not None:
            out += [("linear.W", self.linear.weight), ("linear.b", self.linear.bias)]
        out += [("head.W", self.head.W), ("head.b", self.head.b)]
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def num_trainable(self) -> int:
        return sum(t.size for t in self.params())

    def encode(self, images) -> Tensor:
        """Token features after the backbone and the redistribution stage."""
        x = Tensor(images) if not isinstance(images, Tensor) else images
        lora = self.plan.pairs if self.plan is not None else None
        tokens = forward_backbone(x, self.backbone, lora, self.adapters)
        if self.fsr is not None:
            tokens = fsr_apply(self.fsr, tokens)
        if self.linear is not None:
            tokens = self.linear(tokens)
        return tokens

    def pooled(self, images) -> Tensor:
        return pool_features(self.encode(images))

    def probabilities(self, images) -> Tensor:
        return classify(self.head, self.pooled(images))

    def scores(self, images, batch_size: int = 64) -> np.ndarray:
        """Probability of fake for each image; no augmentation, nothing recorded."""
        out = []
        for i in range(0, len(images), batch_size):
            out.append(self.probabilities(images[i:i + batch_size]).data[:, 1])
        return np.concatenate(out) if out else np.zeros(0)


def build_model(cfg: RunConfig) -> GenDF:
    bcfg = cfg.backbone_config()
    seeds = np.random.SeedSequence(cfg.seeds()["model"]).generate_state(5)
    backbone = init_backbone(bcfg, int(seeds[0]), cfg.backbone_std, cfg.filter_fraction, cfg.filter_gain)
    head = init_head(bcfg.embed_dim, cfg.head_std, seed=int(seeds[1]))
    plan = adapters = fsr = linear = None
    if cfg.dsrl:
        if cfg.peft == "lora":
            plan = build_plan(bcfg, cfg.targets, cfg.rank, cfg.scale, cfg.lora_sigma, int(seeds[2]))
        else:
            adapters = build_adapters(bcfg, cfg.adapter_dim, cfg.lora_sigma, int(seeds[2]))
    if cfg.fsr:
        if cfg.redistribution == "fsr":
            fsr = init_modulation(bcfg.embed_dim, cfg.fsr_sigma, cfg.fsr_sigma, int(seeds[3]))
        else:
            linear = init_linear_redistribution(bcfg.embed_dim)
    return GenDF(backbone, head, plan, adapters, fsr, linear)


@dataclass
class LossTerms:
    total: Tensor
    ce: Tensor
    tri: Tensor
    aug: Tensor | None
    applied: bool

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "ce": self.ce.item(),
            "tri": self.tri.item(),
            "aug": 0.0 if self.aug is None else self.aug.item(),
            "aug_applied": float(self.applied),
        }


def compute_losses(
    model: GenDF,
    images,
    labels,
    weights: LossWeights,
    aug: AugmentationConfig | None,
    rng: np.random.Generator | None,
) -> LossTerms:
    """Training objective for one batch. ``aug=None`` disables augmentation."""
    tokens = model.encode(images)
    batch = LabeledFeatures.from_tokens(tokens, labels)
    ce = cross_entropy(classify(model.head, batch.pooled), batch.labels)
    tri = weighted_triplet(batch.pooled, batch.labels)
    aug_loss, applied = None, False
    if aug is not None:
        feats, applied = cifaug_apply(batch, aug, rng)
        if applied:
            aug_loss = augmentation_loss(model.head, pool_features(feats), batch.labels)
    return LossTerms(total_loss(ce, tri, aug_loss, weights), ce, tri, aug_loss, applied)


# -- persistence -----------------------------------------------------------


def write_model(f: BinaryIO, model: GenDF, cfg: RunConfig | None = None) -> None:
    write_backbone(f, model.backbone)
    if model.plan is not None or model.adapters:
        write_peft(f, model.plan, model.adapters)
    if model.fsr is not None:
        binio.write_tag(f, "FSR")
        binio.write_array(f, model.fsr.theta.data)
        binio.write_array(f, model.fsr.eps.data)
    if model.linear is not None:
        binio.write_tag(f, "LINEAR")
        binio.write_array(f, model.linear.weight.data)
        binio.write_array(f, model.linear.bias.data)
    binio.write_tag(f, "HEAD")
    binio.write_array(f, model.head.W.data)
    binio.write_array(f, model.head.b.data)
    if cfg is not None:
        raw = json.dumps(cfg.to_dict(), sort_keys=True).encode()
        binio.write_tag(f, "CONF")
        binio.write_i32(f, len(raw))
        f.write(raw)


def read_model(f: BinaryIO) -> tuple[GenDF, RunConfig | None]:
    backbone = read_backbone(f)
    plan = adapters = fsr = linear = head = cfg = None
    while (tag := binio.read_tag(f)) is not None:
        if tag == "PEFT":
            plan, adapters = read_peft(f)
        elif tag == "FSR":
            fsr = ModulationParams(Tensor(binio.read_array(f), True, "fsr_theta"),
                                   Tensor(binio.read_array(f), True, "fsr_eps"))
        elif tag == "LINEAR":
            linear = LinearRedistribution(Tensor(binio.read_array(f), True, "linear_w"),
                                          Tensor(binio.read_array(f), True, "linear_b"))
        elif tag == "HEAD":
            head = HeadWeights(Tensor(binio.read_array(f), True, "head_W"),
                               Tensor(binio.read_array(f), True, "head_b"))
        elif tag == "CONF":
            (n,) = binio.read_i32(f)
            cfg = RunConfig(**json.loads(f.read(n)))
        else:
            raise ValueError(f"unknown model section {tag!r}")
    if head is None:
        raise ValueError("model file has no HEAD section")
    return GenDF(backbone, head, plan, adapters, fsr, linear), cfg


def save_model(path, model: GenDF, cfg: RunConfig | None = None) -> None:
    with open(path, "wb") as f:
        write_model(f, model, cfg)


def load_model(path) -> tuple[GenDF, RunConfig | None]:
    with open(path, "rb") as f:
        return read_model(f)
