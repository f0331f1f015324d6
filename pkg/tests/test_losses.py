import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dmtfd.losses import (
    KernelConfig,
    MMLConfig,
    batch_mml,
    ccl_loss,
    cl_loss,
    joint_objective,
    kernel,
    kernel_matrix,
    median_distance,
    mml_loss,
    paired_homology,
    pairwise_sq_dist,
    soft_labels,
)
from dmtfd.propcheck import fd_gradient_error

F64 = torch.float64


def brute_cl(anchor, positive, negatives, include_positive=False):
    def cos(u, v):
        return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))

    s_pos = cos(anchor, positive)
    denom = sum(math.exp(cos(anchor, n)) for n in negatives)
    if include_positive:
        denom += math.exp(s_pos)
    return -math.log(math.exp(s_pos) / denom)


def test_kernel_examples():
    cfg = KernelConfig(sigma=1.0, beta=2.0)
    assert kernel([1.0, 2.0], [1.0, 2.0], cfg).item() == 1.0
    assert kernel([0.0, 0.0], [0.6, 0.8], cfg).item() == pytest.approx(math.exp(-1), abs=1e-12)
    assert kernel([0.0], [2.0], KernelConfig(1.0, 1.0)).item() == pytest.approx(math.exp(-2), abs=1e-12)
    assert kernel([0.0], [2.0], KernelConfig(1.0, 1.0)).item() == pytest.approx(0.13534, abs=1e-5)
    with pytest.raises(ValueError):
        kernel([0.0], [1.0, 2.0], cfg)


def test_kernel_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(sigma=0.0)
    with pytest.raises(ValueError):
        KernelConfig(beta=-1.0)
    with pytest.raises(ValueError):
        MMLConfig(weight_ne=-1)


@given(d1=st.floats(0, 20), d2=st.floats(0, 20), beta=st.floats(0.2, 2.0), sigma=st.floats(0.1, 5))
def test_kernel_bounds_and_monotone(d1, d2, beta, sigma):
    cfg = KernelConfig(sigma, beta)
    k1 = kernel([0.0], [d1], cfg).item()
    k2 = kernel([0.0], [d2], cfg).item()
    assert 0 <= k1 <= 1
    if d1 == 0:
        assert k1 == 1
    if d1 < d2 and k2 > 0:
        assert k1 > k2 or (k1 == k2 == 1.0)


@given(seed=st.integers(0, 1000), beta=st.sampled_from([0.5, 1.0, 1.5, 2.0]))
def test_kernel_matrix_matches_pairwise(seed, beta):
    x = torch.as_tensor(np.random.default_rng(seed).normal(size=(6, 3)))
    cfg = KernelConfig(1.3, beta)
    km = kernel_matrix(x, cfg)
    for i in range(6):
        for j in range(6):
            assert km[i, j].item() == pytest.approx(kernel(x[i], x[j], cfg).item(), abs=1e-7)


def test_kernel_matrix_median_sigma():
    x = torch.tensor([[0.0], [1.0], [3.0]], dtype=F64)
    # off-diagonal distances 1, 3, 2 (each twice) -> median 2
    assert median_distance(pairwise_sq_dist(x)).item() == pytest.approx(2.0)
    km = kernel_matrix(x, KernelConfig(sigma=None))
    assert km[0, 1].item() == pytest.approx(math.exp(-0.25))


def test_cl_examples():
    a, p, n = [1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]]
    assert cl_loss(a, p, n, include_positive=True).item() == pytest.approx(0.31326, abs=1e-5)
    assert cl_loss(a, p, n, include_positive=True).item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    # negatives-only denominator, orthogonal negatives: log N_K - 1
    for n_k in (3, 5, 7):
        negs = np.eye(n_k + 1)[1:]
        anchor = np.eye(n_k + 1)[0]
        assert cl_loss(anchor, anchor, negs).item() == pytest.approx(math.log(n_k) - 1, abs=1e-12)


@given(seed=st.integers(0, 10_000), n_neg=st.integers(1, 6), scale=st.floats(0.01, 100), incl=st.booleans())
def test_cl_matches_brute_force_and_scale_free(seed, n_neg, scale, incl):
    z = np.random.default_rng(seed).normal(size=(n_neg + 2, 4))
    got = cl_loss(z[0], z[1], z[2:], include_positive=incl).item()
    assert got == pytest.approx(brute_cl(z[0], z[1], z[2:], incl), abs=1e-9)
    scaled = cl_loss(scale * z[0], scale * z[1], scale * z[2:], include_positive=incl).item()
    assert scaled == pytest.approx(got, abs=1e-9)


def test_cl_errors():
    with pytest.raises(ValueError):
        cl_loss([0.0, 0.0], [1.0, 0.0], [[0.0, 1.0]])
    with pytest.raises(ValueError):
        cl_loss([1.0, 0.0], [1.0, 0.0], np.zeros((0, 2)))


@given(seed=st.integers(0, 10_000), n_neg=st.integers(3, 9))
def test_cl_decomposition_identity(seed, n_neg):
    z = np.random.default_rng(seed).normal(size=(n_neg + 2, 5))
    cos = (z[1:] @ z[0]) / (np.linalg.norm(z[1:], axis=1) * np.linalg.norm(z[0]))
    s_pos, s = cos[0], cos[1:]
    residual = np.log(np.prod(np.exp(s)) / np.mean(np.exp(s)))
    expanded = np.log(n_neg) - (s_pos - s.sum() + residual)
    assert cl_loss(z[0], z[1], z[2:]).item() == pytest.approx(expanded, abs=1e-9)


def test_ccl_examples():
    assert ccl_loss([1.0], [1]).item() == 0.0
    # Qdot = exp(-S) with Q = exp(S) = 1 gives Qdot = 1
    assert ccl_loss([1.0], [0], q_dot="exp_neg").item() == 0.0
    with pytest.raises(ValueError):
        ccl_loss([0.0], [1])
    with pytest.raises(ValueError):
        ccl_loss([1.2], [1])
    with pytest.raises(ValueError):
        ccl_loss([0.5], [1], q_dot="nope")


@pytest.mark.parametrize("mode", ["one_minus", "exp_neg"])
def test_ccl_double_loop(mode):
    rng = np.random.default_rng(3)
    q = rng.uniform(0.05, 0.95, size=(4, 4))
    h = np.eye(4)
    total = 0.0
    for i in range(4):
        for j in range(4):
            qd = 1 - q[i, j] if mode == "one_minus" else 1 / q[i, j]
            total -= h[i, j] * math.log(q[i, j]) + (1 - h[i, j]) * math.log(qd)
    assert ccl_loss(q, h, q_dot=mode).item() == pytest.approx(total, abs=1e-9)


def test_soft_labels_boost_and_cap():
    s = torch.tensor([[0.5, 0.8], [0.2, 0.9]], dtype=F64)
    h = torch.tensor([[1, 1], [0, 0]])
    p = soft_labels(s, h, 0.5)
    assert p[0, 0].item() == pytest.approx(0.5 * math.exp(0.5))
    assert p[0, 1].item() == 1.0
    assert p[1].tolist() == [0.2, 0.9]


def test_mml_examples():
    cfg = MMLConfig(prior_alpha=0.0, weight_po=1.0, weight_ne=1.0)
    half = torch.full((3, 3), 0.5, dtype=F64)
    zero_h = torch.zeros(3, 3)
    assert mml_loss(half, half, zero_h, cfg).item() == pytest.approx(math.log(2), abs=1e-12)
    assert MMLConfig().weight_po == 1.0 and MMLConfig().weight_ne == 5.0
    with pytest.raises(ValueError):
        mml_loss(half, torch.full((3, 3), float("nan"), dtype=F64), zero_h, cfg)
    with pytest.raises(ValueError):
        mml_loss(half, half[:2], zero_h, cfg)


@given(seed=st.integers(0, 10_000))
def test_mml_stationary_at_q_equals_p(seed):
    rng = np.random.default_rng(seed)
    p = torch.as_tensor(rng.uniform(0.05, 0.95, size=(3, 3)))
    cfg = MMLConfig(prior_alpha=0.0, weight_po=1.0, weight_ne=1.0)
    q = p.clone().requires_grad_()
    (g,) = torch.autograd.grad(mml_loss(p, q, torch.zeros(3, 3), cfg), q)
    assert g.abs().max().item() < 1e-12
    # finite-difference check of the same stationarity
    step = 1e-6
    for idx in [(0, 0), (1, 2)]:
        up, down = p.clone(), p.clone()
        up[idx] += step
        down[idx] -= step
        fd = (mml_loss(p, up, torch.zeros(3, 3), cfg) - mml_loss(p, down, torch.zeros(3, 3), cfg)) / (2 * step)
        assert abs(fd.item()) < 1e-6


def test_mml_minimum_on_grid():
    cfg = MMLConfig(prior_alpha=0.0, weight_po=1.0, weight_ne=1.0)
    for pv in (0.1, 0.37, 0.8):
        p = torch.tensor([[pv]], dtype=F64)
        grid = np.linspace(0.001, 0.999, 999)
        losses = [mml_loss(p, torch.tensor([[q]], dtype=F64), torch.zeros(1, 1), cfg).item() for q in grid]
        assert min(losses) >= 0
        assert grid[int(np.argmin(losses))] == pytest.approx(pv, abs=1.5e-3)


def test_paired_homology():
    h = paired_homology(3)
    assert h.shape == (6, 6)
    assert h.sum().item() == 6
    assert h[0, 3] and h[3, 0] and not h[0, 0]


def test_batch_mml_detaches_p_and_needs_even_batch():
    x = torch.randn(6, 2, 3, dtype=F64, requires_grad=True)
    z = torch.randn(6, 2, 4, dtype=F64, requires_grad=True)
    loss = batch_mml(x, z, MMLConfig())
    gx, gz = torch.autograd.grad(loss, [x, z], allow_unused=True)
    assert gx is None
    assert torch.isfinite(gz).all()
    with pytest.raises(ValueError):
        batch_mml(x[:5], z[:5], MMLConfig())


def test_batch_mml_gradient():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(4, 2, 3, dtype=F64, generator=gen)
    z = torch.randn(4, 2, 3, dtype=F64, generator=gen, requires_grad=True)
    cfg = MMLConfig(kernel=KernelConfig(sigma=2.0))
    assert fd_gradient_error(lambda: batch_mml(x, z, cfg), [z]) < 1e-4


def test_joint_objective_linear():
    assert joint_objective(0.0, 0.0).item() == 0.0
    a = torch.tensor(1.5, dtype=F64, requires_grad=True)
    b = torch.tensor(-0.5, dtype=F64, requires_grad=True)
    f = lambda: joint_objective(a**2, torch.sin(b))  # noqa: E731
    ga, gb = torch.autograd.grad(f(), [a, b])
    assert ga.item() == pytest.approx(3.0) and gb.item() == pytest.approx(math.cos(-0.5))
    assert fd_gradient_error(f, [a, b]) < 1e-4


def test_mml_off_reduces_joint_to_nll():
    assert not MMLConfig(weight_po=0, weight_ne=0).active
    assert MMLConfig().active
