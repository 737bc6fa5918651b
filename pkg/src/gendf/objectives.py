"""Classification head and the three training losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class HeadWeights:
    W: Tensor
    b: Tensor

    def params(self) -> list[Tensor]:
        return [self.W, self.b]


def init_head(dim: int, std: float = 0.02, seed=0, classes: int = 2) -> HeadWeights:
    rng = np.random.default_rng(seed)
    return HeadWeights(
        Tensor(rng.normal(0.0, std, size=(classes, dim)), requires_grad=True, name="head_W"),
        Tensor(np.zeros(classes), requires_grad=True, name="head_b"),
    )


@dataclass(frozen=True)
class LossWeights:
    triplet: float = 0.2
    aug: float = 0.2

    def __post_init__(self):
        if self.triplet < 0 or self.aug < 0:
            raise ConfigError("loss weights must be nonnegative")


def logits(head: HeadWeights, pooled: Tensor) -> Tensor:
    return T.linear(pooled, head.W, head.b)


def classify(head: HeadWeights, pooled: Tensor) -> Tensor:
    """Class probabilities (N, 2); column 1 is the probability of fake."""
    return T.softmax(logits(head, pooled), axis=-1)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[0]
    picked = T.clip(probs[np.arange(n), labels], PROB_FLOOR, 1.0)
    return -T.mean(T.log(picked))


def augmentation_loss(head: HeadWeights, pooled_aug: Tensor, labels) -> Tensor:
    """Cross-entropy of the same head on augmented pooled features."""
    return cross_entropy(classify(head, pooled_aug), labels)


def weighted_triplet(f: Tensor, labels) -> Tensor:
    """Margin-free softplus triplet loss with softmax pair weights.

    Every real sample is an anchor; other reals are its positives and all
    fakes its negatives. Harder positives (farther) and harder negatives
    (closer) get larger weights. Returns the mean over anchors, or 0 when no
    anchor has both a positive and a negative.
    """
    labels = np.asarray(labels)
    real = np.flatnonzero(labels == 0)
    fake = np.flatnonzero(labels == 1)
    if real.size < 2 or fake.size == 0:
        log.debug("weighted_triplet: skipped (%d real, %d fake)", real.size, fake.size)
        return Tensor(0.0)
    fr = f[real]
    d_pos = T.pairwise_distance(fr, fr)
    d_neg = T.pairwise_distance(fr, f[fake])
    m = real.size
    # drop each anchor's zero self-distance
    off = ~np.eye(m, dtype=bool)
    d_pos = T.reshape(d_pos[off], (m, m - 1))
    w_pos = T.softmax(d_pos, axis=1)
    w_neg = T.softmax(-d_neg, axis=1)
    gap = T.tsum(w_pos * d_pos, axis=1) - T.tsum(w_neg * d_neg, axis=1)
    return T.mean(T.softplus(gap))


def total_loss(ce: Tensor, tri: Tensor, aug: Tensor | None, weights: LossWeights) -> Tensor:
    out = T.as_tensor(ce) + T.as_tensor(tri) * weights.triplet
    if aug is not None:
        out = out + T.as_tensor(aug) * weights.aug
    return out
