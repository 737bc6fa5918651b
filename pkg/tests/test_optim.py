import numpy as np

from gendf.optim import AdamW
from gendf.tensor import Tensor


def test_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    p.grad = np.array([0.3, -4.0, 0.0])
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    # bias-corrected m/sqrt(v) equals sign(g) on the first step
    assert np.allclose(p.data, [0.9, -1.9, 0.5], atol=1e-7)


def test_decoupled_decay():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.0])
    AdamW([p], lr=0.1, weight_decay=0.5).step()
    assert np.allclose(p.data, [2.0 * (1 - 0.05)])


def test_matches_reference_recursion():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=4), requires_grad=True)
    ref = p.data.copy()
    m = v = np.zeros(4)
    opt = AdamW([p], lr=0.01, weight_decay=0.01)
    for t in range(1, 6):
        g = rng.normal(size=4)
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 0.01 * 0.01) - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.data, ref, atol=1e-14)


def test_skips_params_without_grad():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = AdamW([p])
    opt.step()
    assert np.array_equal(p.data, np.ones(2))
    p.grad = np.ones(2)
    opt.zero_grad()
    assert p.grad is None
