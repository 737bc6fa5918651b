"""Small ViT-style encoder used as the frozen backbone."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Mapping

import numpy as np

from . import binio
from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

MAGIC = b"GENDF1"
TARGETS = ("Q", "K", "V")


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 2
    mlp_ratio: float = 4.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @classmethod
    def vit_b16(cls) -> BackboneConfig:
        """ViT-B/16 shape. Only meant for parameter counting."""
        return cls(image_size=224, patch_size=16, embed_dim=768, num_heads=12, num_blocks=12)


@dataclass
class BlockWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor

    FIELDS = ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "b_o",
              "ln2_g", "ln2_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2")

    def tensors(self) -> list[Tensor]:
        return [getattr(self, k) for k in self.FIELDS]

    def projection(self, target: str) -> Tensor:
        return {"Q": self.w_q, "K": self.w_k, "V": self.w_v}[target]


@dataclass
class BackboneWeights:
    config: BackboneConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: list[BlockWeights] = field(default_factory=list)

    def tensors(self) -> list[Tensor]:
        out = [self.patch_w, self.patch_b, self.cls_token, self.pos_embed]
        for blk in self.blocks:
            out.extend(blk.tensors())
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors():
            h.update(np.asarray(t.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())


def gabor_filters(count: int, cfg: BackboneConfig, rng: np.random.Generator,
                  band: tuple[float, float] = (0.2, 0.4)) -> np.ndarray:
    """Zero-mean, unit-norm oriented Gabor filters flattened to patch-embedding rows.

    Frequencies (cycles/pixel) are drawn from ``band``; each filter is shared
    across channels through a random unit colour mix.
    """
    p = cfg.patch_size
    yy, xx = np.mgrid[0:p, 0:p] - (p - 1) / 2.0
    rows = np.empty((count, cfg.patch_dim))
    for i in range(count):
        theta = rng.uniform(0.0, math.pi)
        freq = rng.uniform(*band)
        phase = rng.uniform(0.0, 2 * math.pi)
        u = xx * math.cos(theta) + yy * math.sin(theta)
        g = np.exp(-(xx**2 + yy**2) / (2 * (p / 3.0) ** 2)) * np.cos(2 * math.pi * freq * u + phase)
        g -= g.mean()
        g /= np.linalg.norm(g)
        mix = rng.normal(size=cfg.channels)
        mix /= np.linalg.norm(mix)
        rows[i] = np.concatenate([m * g.ravel() for m in mix])
    return rows


def init_backbone(
    cfg: BackboneConfig,
    seed: int = 0,
    std: float = 0.02,
    filter_fraction: float = 0.375,
    filter_gain: float = 8.0,
) -> BackboneWeights:
    """Seeded stand-in for pretrained weights; every tensor is frozen.

    All matrices are N(0, std^2). The first ``filter_fraction`` of the
    patch-embedding rows are replaced by oriented high-frequency filters
    scaled by ``filter_gain``, the kind of local edge detectors a trained
    patch embedding contains.
    """
    if not 0.0 <= filter_fraction <= 1.0:
        raise ConfigError(f"filter_fraction must lie in [0, 1], got {filter_fraction}")
    rng = np.random.default_rng(seed)
    D, M = cfg.embed_dim, cfg.mlp_dim

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape))

    def const(value, n):
        return Tensor(np.full(n, float(value)))

    blocks = []
    for _ in range(cfg.num_blocks):
        blocks.append(BlockWeights(
            ln1_g=const(1, D), ln1_b=const(0, D),
            w_q=normal(D, D), w_k=normal(D, D), w_v=normal(D, D),
            w_o=normal(D, D), b_o=const(0, D),
            ln2_g=const(1, D), ln2_b=const(0, D),
            w_fc1=normal(M, D), b_fc1=const(0, M),
            w_fc2=normal(D, M), b_fc2=const(0, D),
        ))
    patch_w = normal(D, cfg.patch_dim)
    n_filters = int(round(filter_fraction * D))
    if n_filters:
        patch_w.data[:n_filters] = filter_gain * gabor_filters(n_filters, cfg, rng)
    return BackboneWeights(
        config=cfg,
        patch_w=patch_w,
        patch_b=const(0, D),
        cls_token=normal(D),
        pos_embed=normal(cfg.num_tokens, D),
        blocks=blocks,
    )


def patchify(images: Tensor, cfg: BackboneConfig) -> Tensor:
    """(N, C, H, W) -> (N, patches, C*p*p), patches in row-major order."""
    images = T.as_tensor(images)
    if images.ndim != 4:
        raise ConfigError(f"expected images of shape (N, C, H, W), got {images.shape}")
    n, c, h, w = images.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"image size {h}x{w} not divisible by patch size {p}")
    if (h, w) != (cfg.image_size, cfg.image_size) or c != cfg.channels:
        raise ConfigError(
            f"images {images.shape[1:]} do not match config "
            f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})"
        )
    gh, gw = h // p, w // p
    x = T.reshape(images, (n, c, gh, p, gw, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (n, gh * gw, c * p * p))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, t, d = x.shape
    return T.transpose(T.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))


def attention_weights(q: Tensor, k: Tensor, head_dim: int) -> Tensor:
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    return T.softmax(scores, axis=-1)


def self_attention(
    x: Tensor,
    block: BlockWeights,
    cfg: BackboneConfig,
    lora: Mapping[str, object] | None = None,
    probe: list | None = None,
) -> Tensor:
    """Multi-head self-attention with optional low-rank deltas on the projections.

    ``lora`` maps a projection name ("Q", "K" or "V") to an object exposing
    ``delta(x)`` and ``rank``. When ``probe`` is given, the attention weights
    of every head are appended to it.
    """
    lora = lora or {}
    D = cfg.embed_dim
    proj = {}
    for name in TARGETS:
        out = T.linear(x, block.projection(name))
        pair = lora.get(name)
        if pair is not None:
            if pair.rank >= D:
                raise ConfigError(f"LoRA rank {pair.rank} must be below embed_dim {D}")
            out = out + pair.delta(x)
        proj[name] = _split_heads(out, cfg.num_heads)
    attn = attention_weights(proj["Q"], proj["K"], cfg.head_dim)
    if probe is not None:
        probe.append(attn.data)
    ctx = T.matmul(attn, proj["V"])
    n, _, t, _ = ctx.shape
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, t, D))
    return T.linear(ctx, block.w_o, block.b_o)


def mlp(x: Tensor, block: BlockWeights) -> Tensor:
    return T.linear(T.gelu(T.linear(x, block.w_fc1, block.b_fc1)), block.w_fc2, block.b_fc2)


Adapter = Callable[[Tensor], Tensor]


def embed(images: Tensor, weights: BackboneWeights) -> Tensor:
    cfg = weights.config
    patches = patchify(images, cfg)
    tokens = T.linear(patches, weights.patch_w, weights.patch_b)
    n = tokens.shape[0]
    cls = T.reshape(weights.cls_token, (1, 1, cfg.embed_dim))
    cls = T.add(cls, Tensor(np.zeros((n, 1, cfg.embed_dim))))
    x = T.concat([cls, tokens], axis=1)
    return x + weights.pos_embed


def forward_backbone(
    images: Tensor,
    weights: BackboneWeights,
    lora_set: Mapping[tuple[int, str], object] | None = None,
    adapters: Mapping[tuple[int, str], Adapter] | None = None,
    probe: list | None = None,
) -> Tensor:
    """Encode images to final token features of shape (N, T, D).

    ``lora_set`` is keyed by ``(block_index, target)``. ``adapters`` is keyed
    by ``(block_index, "attn" | "mlp")`` and wraps the corresponding branch
    output before its residual add.
    """
    cfg = weights.config
    lora_set = lora_set or {}
    adapters = adapters or {}
    x = embed(images, weights)
    for i, blk in enumerate(weights.blocks):
        lora = {t: lora_set[(i, t)] for t in TARGETS if (i, t) in lora_set}
        h = self_attention(T.layer_norm(x, blk.ln1_g, blk.ln1_b, cfg.ln_eps), blk, cfg, lora, probe)
        if (i, "attn") in adapters:
            h = adapters[(i, "attn")](h)
        x = x + h
        h = mlp(T.layer_norm(x, blk.ln2_g, blk.ln2_b, cfg.ln_eps), blk)
        if (i, "mlp") in adapters:
            h = adapters[(i, "mlp")](h)
        x = x + h
    return x


def pool_features(tokens: Tensor) -> Tensor:
    """Mean over all tokens, class token included."""
    return T.mean(tokens, axis=1)


# -- persistence -----------------------------------------------------------


def _config_ints(cfg: BackboneConfig) -> tuple[int, ...]:
    return (cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim,
            cfg.num_heads, cfg.num_blocks, cfg.mlp_dim)


def write_backbone(f: BinaryIO, weights: BackboneWeights) -> None:
    f.write(MAGIC)
    ints = _config_ints(weights.config)
    binio.write_i32(f, len(ints), *ints)
    binio.write_f64(f, weights.config.ln_eps)
    for t in weights.tensors():
        binio.write_array(f, t.data)


def read_backbone(f: BinaryIO) -> BackboneWeights:
    if f.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a GENDF1 weight file")
    (count,) = binio.read_i32(f)
    ints = binio.read_i32(f, count)
    (eps,) = binio.read_f64(f)
    image, patch, ch, dim, heads, blocks, mlp_dim = ints
    cfg = BackboneConfig(image, patch, ch, dim, heads, blocks, mlp_dim / dim, eps)
    if cfg.mlp_dim != mlp_dim:
        raise ValueError(f"cannot represent mlp width {mlp_dim} for embed_dim {dim}")

    def nxt():
        return Tensor(binio.read_array(f))

    head = [nxt() for _ in range(4)]
    blks = []
    for _ in range(blocks):
        blks.append(BlockWeights(**{k: nxt() for k in BlockWeights.FIELDS}))
    return BackboneWeights(cfg, *head, blocks=blks)


def save_backbone(path, weights: BackboneWeights) -> None:
    with open(path, "wb") as f:
        write_backbone(f, weights)


def load_backbone(path) -> BackboneWeights:
    with open(path, "rb") as f:
        return read_backbone(f)
