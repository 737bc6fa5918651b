"""Feature space redistribution and class-invariant feature augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import pool_features
from .errors import ConfigError, DegenerateError
from .tensor import Tensor


@dataclass
class ModulationParams:
    theta: Tensor
    eps: Tensor

    def params(self) -> list[Tensor]:
        return [self.theta, self.eps]


def init_modulation(dim: int, sigma_theta: float = 0.02, sigma_eps: float = 0.02, seed=0) -> ModulationParams:
    rng = np.random.default_rng(seed)
    theta = Tensor(rng.normal(1.0, sigma_theta, size=dim), requires_grad=True, name="fsr_theta")
    eps = Tensor(rng.normal(0.0, sigma_eps, size=dim), requires_grad=True, name="fsr_eps")
    return ModulationParams(theta, eps)


def identity_modulation(dim: int) -> ModulationParams:
    return ModulationParams(
        Tensor(np.ones(dim), requires_grad=True, name="fsr_theta"),
        Tensor(np.zeros(dim), requires_grad=True, name="fsr_eps"),
    )


def fsr_apply(params: ModulationParams, x: Tensor) -> Tensor:
    """Per-token elementwise affine map ``theta * x + eps``."""
    if x.shape[-1] != params.theta.shape[0]:
        raise T.ShapeError(f"fsr: feature size {x.shape[-1]} does not match {params.theta.shape[0]}")
    return x * params.theta + params.eps


@dataclass
class LinearRedistribution:
    """Dense D x D replacement for FSR, used by the fsr-vs-linear ablation."""

    weight: Tensor
    bias: Tensor

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def init_linear_redistribution(dim: int) -> LinearRedistribution:
    return LinearRedistribution(
        Tensor(np.eye(dim), requires_grad=True, name="linear_w"),
        Tensor(np.zeros(dim), requires_grad=True, name="linear_b"),
    )


@dataclass
class AugmentationConfig:
    sigma: float = 0.02
    activation_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.activation_probability <= 1.0:
            raise ConfigError(f"activation_probability must be in [0, 1], got {self.activation_probability}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be nonnegative, got {self.sigma}")


@dataclass
class LabeledFeatures:
    features: Tensor
    pooled: Tensor
    labels: np.ndarray

    @classmethod
    def from_tokens(cls, features: Tensor, labels) -> LabeledFeatures:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (features.shape[0],):
            raise T.ShapeError(f"{labels.shape[0]} labels for a batch of {features.shape[0]}")
        return cls(features, pool_features(features), labels)

    def has_both_classes(self) -> bool:
        return bool(np.any(self.labels == 0) and np.any(self.labels == 1))


def _unit(v: Tensor) -> Tensor:
    return v / T.l2_norm(v)


def class_direction(f: Tensor, labels) -> Tensor:
    """Unit vector from the fake centroid to the real centroid."""
    labels = np.asarray(labels)
    real = np.flatnonzero(labels == 0)
    fake = np.flatnonzero(labels == 1)
    if real.size == 0 or fake.size == 0:
        raise DegenerateError("class direction needs both real and fake samples")
    diff = T.mean(f[real], axis=0) - T.mean(f[fake], axis=0)
    if not np.any(diff.data):
        raise DegenerateError("real and fake centroids coincide")
    return _unit(diff)


def orthogonal_direction(d_cls: Tensor, seed=None, d_rand=None, max_attempts: int = 8) -> Tensor:
    """Gram-Schmidt a Gaussian direction against ``d_cls`` and normalise.

    If the residual is numerically zero, the draw is repeated with the seed
    incremented, up to ``max_attempts`` times.
    """
    dim = d_cls.shape[0]
    for attempt in range(max_attempts):
        if d_rand is not None and attempt == 0:
            r = np.asarray(d_rand, dtype=np.float64)
        elif seed is None:
            raise DegenerateError("random direction is parallel to d_cls and no seed was given")
        else:
            r = np.random.default_rng(int(seed) + attempt).normal(size=dim)
        r = Tensor(r)
        coef = T.tsum(r * d_cls) / T.tsum(d_cls * d_cls)
        resid = r - coef * d_cls
        if np.linalg.norm(resid.data) >= 1e-8:
            return _unit(resid)
    raise DegenerateError(f"no direction orthogonal to d_cls found after {max_attempts} draws (D={dim})")


@dataclass
class AugmentationInfo:
    beta: float
    d_cls: Tensor
    d_per: Tensor


def cifaug_apply(
    batch: LabeledFeatures,
    cfg: AugmentationConfig,
    rng: np.random.Generator | None = None,
    return_info: bool = False,
):
    """Shift every token of sample i by ``beta * ||f_i|| * d_per``.

    ``beta`` and ``d_per`` are drawn once per call. The activation coin is
    flipped first; single-class or degenerate batches are passed through
    with ``applied=False``. Returns ``(features, applied)``, plus an
    :class:`AugmentationInfo` (or ``None``) when ``return_info`` is set.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    info = None
    out, applied = batch.features, False
    if rng.random() < cfg.activation_probability and batch.has_both_classes():
        beta = float(rng.uniform(-cfg.sigma, cfg.sigma)) if cfg.sigma > 0 else 0.0
        dir_seed = int(rng.integers(0, 2**62))
        try:
            d_cls = class_direction(batch.pooled, batch.labels)
            d_per = orthogonal_direction(d_cls, seed=dir_seed)
        except DegenerateError:
            d_cls = d_per = None
        if d_per is not None:
            n, _, dim = batch.features.shape
            norms = T.l2_norm(batch.pooled, axis=1, keepdims=True)
            shift = (norms * beta) * T.reshape(d_per, (1, dim))
            out = batch.features + T.reshape(shift, (n, 1, dim))
            applied = True
            info = AugmentationInfo(beta, d_cls, d_per)
    if return_info:
        return out, applied, info
    return out, applied
