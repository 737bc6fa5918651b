"""Synthetic real/fake images, image perturbations, and detection metrics.

Real images are smooth colour fields. Fakes splice a rectangle from a second
smooth field with a per-channel colour mismatch, leaving a discontinuity along
the rectangle boundary.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DegenerateError

FAKE_SOURCE_OFFSET = 10**6
_GRID = 4


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    label: int
    seed: int
    forgery_box: tuple[int, int, int, int] | None = None  # top, left, height, width


def _bilinear(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gy = np.linspace(0.0, grid.shape[0] - 1, h)
    gx = np.linspace(0.0, grid.shape[1] - 1, w)
    rows = np.stack([np.interp(gx, np.arange(grid.shape[1]), r) for r in grid])
    return np.stack([np.interp(gy, np.arange(grid.shape[0]), c) for c in rows.T], axis=1)


def _smooth_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.75)
    chans = []
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(3):
        grid = base + rng.normal(0.0, 0.12, size=(_GRID, _GRID))
        img = _bilinear(grid, h, w)
        for _ in range(2):
            amp = rng.uniform(0.0, 0.03)
            fy, fx = rng.uniform(-1.0, 1.0, size=2) * (2 * math.pi / 24)
            phase = rng.uniform(0, 2 * math.pi)
            img = img + amp * np.sin(fy * yy + fx * xx + phase)
        chans.append(img)
    return np.clip(np.stack(chans), 0.0, 1.0)


def generate_real(seed: int, H: int = 32, W: int = 32) -> SyntheticSample:
    if H < 16 or W < 16:
        raise ConfigError(f"images must be at least 16x16, got {H}x{W}")
    rng = np.random.default_rng([int(seed), H, W])
    return SyntheticSample(_smooth_field(rng, H, W), 0, int(seed))


def generate_fake(seed: int, H: int = 32, W: int = 32) -> SyntheticSample:
    base = generate_real(seed, H, W).image
    donor = generate_real(seed + FAKE_SOURCE_OFFSET, H, W).image
    rng = np.random.default_rng([int(seed), H, W, 1])
    lo, hi = math.ceil(0.25 * H), math.floor(0.5 * H)
    bh, bw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    top = int(rng.integers(0, H - bh + 1))
    left = int(rng.integers(0, W - bw + 1))
    gain = rng.uniform(0.85, 1.15, size=(3, 1, 1))
    bias = rng.uniform(-0.08, 0.08, size=(3, 1, 1))
    patch = np.clip(gain * donor[:, top:top + bh, left:left + bw] + bias, 0.0, 1.0)
    # outermost ring of the box is a 50/50 blend
    alpha = np.full((bh, bw), 0.5)
    alpha[1:-1, 1:-1] = 1.0
    img = base.copy()
    region = img[:, top:top + bh, left:left + bw]
    img[:, top:top + bh, left:left + bw] = alpha * patch + (1.0 - alpha) * region
    return SyntheticSample(img, 1, int(seed), (top, left, bh, bw))


def generate_sample(seed: int, label: int, H: int = 32, W: int = 32) -> SyntheticSample:
    return generate_fake(seed, H, W) if label else generate_real(seed, H, W)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W)
    labels: np.ndarray  # (N,) int
    seeds: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.seeds[idx])


def make_dataset(count: int, base_seed: int, H: int = 32, W: int = 32) -> Dataset:
    """Balanced split: even positions real, odd positions fake, seeds ``base_seed + i``."""
    samples = [generate_sample(base_seed + i, i % 2, H, W) for i in range(count)]
    return Dataset(
        np.stack([s.image for s in samples]) if samples else np.zeros((0, 3, H, W)),
        np.array([s.label for s in samples], dtype=np.int64),
        np.array([s.seed for s in samples], dtype=np.int64),
    )


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(ds.images.shape, dtype="<i8").tobytes())
    h.update(ds.labels.astype("<u1").tobytes())
    h.update(ds.seeds.astype("<i8").tobytes())
    h.update(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
    return h.hexdigest()


def write_dataset(path, ds: Dataset) -> None:
    """Header ``<III`` (count, H, W); per sample: label u8, seed i64, 3*H*W float64."""
    n, _, h, w = ds.images.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<III", n, h, w))
        for img, lab, seed in zip(ds.images, ds.labels, ds.seeds):
            f.write(struct.pack("<Bq", int(lab), int(seed)))
            f.write(np.ascontiguousarray(img, dtype="<f8").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        n, h, w = struct.unpack("<III", f.read(12))
        block = 3 * h * w * 8
        images, labels, seeds = [], [], []
        for _ in range(n):
            lab, seed = struct.unpack("<Bq", f.read(9))
            raw = f.read(block)
            if len(raw) != block:
                raise EOFError(f"{path}: truncated sample block")
            images.append(np.frombuffer(raw, dtype="<f8").reshape(3, h, w))
            labels.append(lab)
            seeds.append(seed)
    return Dataset(
        np.stack(images).astype(np.float64) if images else np.zeros((0, 3, h, w)),
        np.array(labels, dtype=np.int64),
        np.array(seeds, dtype=np.int64),
    )


def write_manifest(path, splits: dict[str, Dataset], extra: dict | None = None) -> dict:
    manifest = {
        "splits": {
            name: {
                "count": len(ds),
                "fake": int(ds.labels.sum()),
                "height": int(ds.images.shape[2]),
                "width": int(ds.images.shape[3]),
                "first_seed": int(ds.seeds[0]) if len(ds) else None,
                "sha256": dataset_digest(ds),
            }
            for name, ds in splits.items()
        }
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- perturbations ---------------------------------------------------------

PERTURBATIONS = ("contrast", "saturation", "pixelate", "blur")
DEFAULT_SEVERITY = {"contrast": 1.5, "saturation": 2.0, "pixelate": 2.0, "blur": 1.0}
IDENTITY_SEVERITY = {"contrast": 1.0, "saturation": 1.0, "pixelate": 1.0, "blur": 0.0}


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in PERTURBATIONS:
            raise ConfigError(f"unknown perturbation {self.kind!r}; expected one of {PERTURBATIONS}")
        # zero is allowed for saturation (grayscale) and blur (identity)
        if self.severity < 0 or (self.severity == 0 and self.kind in ("contrast", "pixelate")):
            raise ConfigError(f"invalid severity {self.severity} for {self.kind}")


def _gaussian_kernel(std: float) -> np.ndarray:
    size = math.ceil(6 * std)
    if size % 2 == 0:
        size += 1
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / std) ** 2)
    return k / k.sum()


def _blur(img: np.ndarray, std: float) -> np.ndarray:
    k = _gaussian_kernel(std)
    half = len(k) // 2
    _, h, w = img.shape
    if half >= min(h, w):
        raise ConfigError(f"blur std {std} too large for a {h}x{w} image")
    out = np.pad(img, ((0, 0), (0, 0), (half, half)), mode="reflect")
    out = sum(k[i] * out[:, :, i:i + w] for i in range(len(k)))
    out = np.pad(out, ((0, 0), (half, half), (0, 0)), mode="reflect")
    return sum(k[i] * out[:, i:i + h, :] for i in range(len(k)))


def _pixelate(img: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool by ``factor`` and upsample by repetition.

    Sizes not divisible by ``factor`` are edge-padded up to the next multiple,
    processed, and cropped back.
    """
    c, h, w = img.shape
    ph, pw = -h % factor, -w % factor
    x = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge") if ph or pw else img
    H, W = x.shape[1:]
    pooled = x.reshape(c, H // factor, factor, W // factor, factor).mean(axis=(2, 4))
    up = np.repeat(np.repeat(pooled, factor, axis=1), factor, axis=2)
    return up[:, :h, :w]


def perturb(image: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """Apply one perturbation to a (3, H, W) image; identity severities return the input unchanged."""
    x = np.asarray(image, dtype=np.float64)
    s = spec.severity
    if spec.kind == "contrast":
        if s == 1.0:
            return x.copy()
        return np.clip((x - 0.5) * s + 0.5, 0.0, 1.0)
    if spec.kind == "saturation":
        if s == 1.0:
            return x.copy()
        luma = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
        return np.clip(luma + s * (x - luma), 0.0, 1.0)
    if spec.kind == "pixelate":
        factor = int(round(s))
        if factor <= 1:
            return x.copy()
        return _pixelate(x, factor)
    if s == 0:
        return x.copy()
    return _blur(x, s)


def perturb_batch(images: np.ndarray, spec: PerturbationSpec | None) -> np.ndarray:
    if spec is None:
        return images
    return np.stack([perturb(img, spec) for img in images])


# -- metrics ---------------------------------------------------------------


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"{self.scores.size} scores for {self.labels.size} labels")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        real = self.scores[self.labels == 0]
        fake = self.scores[self.labels == 1]
        if real.size == 0 or fake.size == 0:
            raise DegenerateError("metric needs both real and fake samples")
        return real, fake


def auc(s: ScoreSet) -> float:
    """P(random fake scores above random real), ties counted as 1/2 (rank-sum form)."""
    real, fake = s.split()
    ranks = rankdata(np.concatenate([real, fake]))
    rank_sum = ranks[real.size:].sum()
    n_f = fake.size
    return float((rank_sum - n_f * (n_f + 1) / 2.0) / (real.size * n_f))


def eer(s: ScoreSet) -> float:
    """Equal error rate; a sample is called fake when ``score >= threshold``.

    Thresholds run over the distinct scores. At the threshold minimising
    |FPR - FNR| (lowest threshold on ties), returns (FPR + FNR) / 2.
    """
    real, fake = s.split()
    thresholds = np.unique(s.scores)
    real_sorted, fake_sorted = np.sort(real), np.sort(fake)
    fpr = 1.0 - np.searchsorted(real_sorted, thresholds, side="left") / real.size
    fnr = np.searchsorted(fake_sorted, thresholds, side="left") / fake.size
    best = int(np.argmin(np.abs(fpr - fnr)))
    return float((fpr[best] + fnr[best]) / 2.0)


def accuracy(s: ScoreSet, threshold: float = 0.5) -> float:
    if s.scores.size == 0:
        return float("nan")
    return float(np.mean((s.scores > threshold).astype(np.int64) == s.labels))
