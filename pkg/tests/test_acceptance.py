"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line,
repeated in the terminal summary under "acceptance criteria"."""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gendf import tensor as T
from gendf.backbone import BackboneConfig, forward_backbone, pool_features
from gendf.cli import main as cli_main
from gendf.config import RunConfig
from gendf.features import AugmentationConfig, LabeledFeatures, cifaug_apply, identity_modulation
from gendf.harness import ablate, datasets_for, gradcheck, median_auc, robustness, train
from gendf.model import build_model
from gendf.objectives import logits
from gendf.peft import PeftPlan, count_trainable_params
from gendf.synthbench import ScoreSet, accuracy, auc, eer
from gendf.tensor import Tensor

# tolerances and bounds as stated in the criteria
INIT_TOL = 1e-12
GRAD_TOL = 1e-4
ORTHO_TOL = 1e-10
NORM_TOL = 1e-12
SHIFT_TOL = 1e-9
AUC_ORACLE_TOL = 1e-12
RATE_BAND = (0.48, 0.52)
SEPARATION_AUC = 0.95
ORDER_SLACK = 0.01


def record(num: int, name: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] {num:2d} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def components():
    t0 = time.perf_counter()
    rows = ablate(RunConfig(), "components", seeds=range(5))
    return rows, median_auc(rows), time.perf_counter() - t0


@pytest.fixture(scope="module")
def trained():
    cfg = RunConfig()
    t0 = time.perf_counter()
    digest_before = build_model(cfg).backbone.digest()
    result = train(cfg)
    return cfg, result, digest_before, time.perf_counter() - t0


def test_01_parameter_counts():
    t0 = time.perf_counter()
    vit = BackboneConfig.vit_b16()
    got = {r: count_trainable_params(PeftPlan(rank=r), vit) for r in (4, 16, 64)}
    fsr = count_trainable_params(None, vit, include_fsr=True)
    head = count_trainable_params(None, vit, include_head=True)
    full = count_trainable_params(PeftPlan(rank=8), vit, include_head=True, include_fsr=True)
    elapsed = time.perf_counter() - t0
    ok = (got == {4: 147_456, 16: 589_824, 64: 2_359_296} and fsr == 1536 and head == 1538
          and full == 297_986 and abs(full - 0.28e6) / 0.28e6 < 0.10 and elapsed < 1.0)
    record(1, "parameter counts", ok,
           f"r4={got[4]} r16={got[16]} r64={got[64]} fsr={fsr} head={head} r8 total={full} "
           f"({abs(full - 0.28e6) / 0.28e6:.1%} from 0.28M) in {elapsed * 1e3:.1f} ms")


def test_02_init_identity_chain():
    cfg = RunConfig()
    model = build_model(cfg)
    model.fsr = identity_modulation(cfg.embed_dim)
    assert all(not np.any(p.B.data) for p in model.plan.pairs.values())
    imgs = np.random.default_rng(2024).uniform(size=(64, 3, cfg.image_size, cfg.image_size))
    full = logits(model.head, model.pooled(imgs)).data
    frozen = logits(model.head, pool_features(forward_backbone(Tensor(imgs), model.backbone))).data
    diff = float(np.max(np.abs(full - frozen)))
    record(2, "init identity", diff <= INIT_TOL, f"max |logit diff| = {diff:.1e} over 64 images (tol {INIT_TOL:g})")


def test_03_gradient_correctness():
    t0 = time.perf_counter()
    report = gradcheck(RunConfig(), h=1e-5)
    elapsed = time.perf_counter() - t0
    need = {"lora.A", "lora.B", "fsr.theta", "fsr.eps", "head.W", "head.b"}
    worst = max(report.values())
    ok = need <= set(report) and worst < GRAD_TOL and elapsed < 120
    detail = ", ".join(f"{k}={v:.1e}" for k, v in sorted(report.items()))
    record(3, "gradient check", ok, f"{detail}; max {worst:.1e} < {GRAD_TOL:g} in {elapsed:.0f} s")


def test_04_cifaug_geometry():
    t0 = time.perf_counter()
    cfg = AugmentationConfig(sigma=0.02, activation_probability=1.0)
    worst_dot = worst_norm = worst_shift = 0.0
    applied = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        labels = rng.permutation(np.arange(8) % 2)
        feats = Tensor(rng.normal(size=(8, 17, 64)) + 0.3 * labels[:, None, None])
        batch = LabeledFeatures.from_tokens(feats, labels)
        out, ok, info = cifaug_apply(batch, cfg, rng, return_info=True)
        applied += ok
        d_cls, d_per = info.d_cls.data, info.d_per.data
        worst_dot = max(worst_dot, abs(float(d_per @ d_cls)))
        worst_norm = max(worst_norm, abs(float(np.linalg.norm(d_per)) - 1.0))
        delta = out.data.mean(axis=1) - batch.pooled.data
        worst_shift = max(worst_shift, float(np.max(np.abs(delta @ d_cls))))
    elapsed = time.perf_counter() - t0
    ok = (applied == 1000 and worst_dot < ORTHO_TOL and worst_norm <= NORM_TOL
          and worst_shift <= SHIFT_TOL and elapsed < 30)
    record(4, "CIFAug geometry", ok,
           f"1000 batches: max|<d_per,d_cls>|={worst_dot:.1e}, max|norm-1|={worst_norm:.1e}, "
           f"max class-axis shift={worst_shift:.1e} in {elapsed:.1f} s")


def test_05_frozen_weights_and_coin(trained):
    cfg, result, digest_before, elapsed = trained
    after = result.model.backbone.digest()
    batch = LabeledFeatures.from_tokens(Tensor(np.random.default_rng(0).normal(size=(4, 2, 8))), [0, 1, 0, 1])
    rng = np.random.default_rng(cfg.seeds()["aug"])
    aug = cfg.aug_config()
    rate = float(np.mean([cifaug_apply(batch, aug, rng)[1] for _ in range(10_000)]))
    ok = (after == digest_before == result.frozen_digest and RATE_BAND[0] <= rate <= RATE_BAND[1]
          and elapsed < 300)
    record(5, "frozen weights", ok,
           f"digest {digest_before[:12]} unchanged after {cfg.steps} steps ({elapsed:.0f} s); "
           f"applied rate {rate:.4f} over 10000 flips")


def test_06_metric_oracles():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        labels = np.r_[0, 1, rng.integers(0, 2, n - 2)]
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        real, fake = scores[labels == 0], scores[labels == 1]
        brute = np.mean([1.0 if f > r else 0.5 if f == r else 0.0 for r in real for f in fake])
        worst = max(worst, abs(auc(ScoreSet(scores, labels)) - brute))
    eers = (eer(ScoreSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])),
            eer(ScoreSet([0.8, 0.9, 0.1, 0.2], [0, 0, 1, 1])),
            eer(ScoreSet([0.1, 0.9, 0.2, 0.8], [0, 0, 1, 1])))
    accs = (accuracy(ScoreSet([0.1, 0.9], [0, 1])), accuracy(ScoreSet([0.1, 0.9], [1, 0])),
            accuracy(ScoreSet([0.1, 0.2, 0.9, 0.4], [0, 0, 1, 1])))
    ok = worst <= AUC_ORACLE_TOL and eers == (0.0, 1.0, 0.5) and accs == (1.0, 0.0, 0.75)
    record(6, "metric oracles", ok, f"auc vs pairwise max err {worst:.1e} on 200 sets; eer {eers}; accuracy {accs}")


def test_07_separation(components):
    rows, med, elapsed = components
    full, head = med["e_full"], med["a_head_only"]
    ok = full >= SEPARATION_AUC and head < full and elapsed < 600
    record(7, "separation", ok,
           f"median held-out AUC over 5 seeds: full {full:.4f} (>= {SEPARATION_AUC}), head-only {head:.4f}; "
           f"{elapsed:.0f} s for 25 runs")


def test_08_ablation_ordering(components):
    _, med, _ = components
    full = med["e_full"]
    others = {k: med[k] for k in ("b_fsr_cifaug", "c_dsrl_cifaug", "d_dsrl_fsr")}
    ok = all(full >= v - ORDER_SLACK for v in others.values())
    detail = ", ".join(f"{k}={v:.4f}" for k, v in others.items())
    record(8, "ablation ordering", ok, f"full {full:.4f} vs {detail} (slack {ORDER_SLACK})")


def test_09_robustness(trained):
    cfg, result, _, _ = trained
    t0 = time.perf_counter()
    recs = robustness(result.model, datasets_for(cfg)[1], cfg)
    elapsed = time.perf_counter() - t0
    clean = recs[0].auc
    by_kind = {r.perturbation.split(":")[0]: r.auc for r in recs[1:]}
    deltas = {k: v - clean for k, v in by_kind.items()}
    ok = (len(by_kind) == 4 and all(np.isfinite(v) for v in by_kind.values())
          and deltas["blur"] < 0 and deltas["pixelate"] < 0 and elapsed < 120)
    detail = ", ".join(f"{k}={v:.4f} ({deltas[k]:+.4f})" for k, v in by_kind.items())
    record(9, "robustness", ok, f"clean {clean:.4f}; {detail}; {elapsed:.1f} s")


def test_10_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("GENDF_SEED", raising=False)
    for name in ("a", "b"):
        assert cli_main(["train", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    n = len(a.splitlines())
    final = json.loads(a.splitlines()[-1])
    record(10, "determinism", a == b and n > 1, f"{n} JSON lines, byte-identical={a == b}, final auc {final['auc']:.4f}")
