import json

import numpy as np
import pytest
import torch
from hypothesis import assume, given
from hypothesis import strategies as st

from dmtfd.diffnet import (
    GraphEncoder,
    ManifoldHead,
    NonFiniteError,
    TemporalEncoder,
    backprop,
    load_checkpoint,
    save_checkpoint,
)
from dmtfd.propcheck import KINK_MARGIN, fd_gradient_error, head_kink_margin, randomize_

F64 = torch.float64


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def numpy_gru(windows, gru):
    """Gate equations written out by hand (reset applied inside the candidate)."""
    w_ih = gru.weight_ih_l0.detach().numpy()
    w_hh = gru.weight_hh_l0.detach().numpy()
    b_ih = gru.bias_ih_l0.detach().numpy()
    b_hh = gru.bias_hh_l0.detach().numpy()
    h_dim = w_hh.shape[1]
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    b, k, t = windows.shape
    out = np.zeros((b, k, h_dim))
    for i in range(b):
        for j in range(k):
            h = np.zeros(h_dim)
            for step in range(t):
                gi = w_ih[:, 0] * windows[i, j, step] + b_ih
                gh = w_hh @ h + b_hh
                r = sig(gi[:h_dim] + gh[:h_dim])
                z = sig(gi[h_dim : 2 * h_dim] + gh[h_dim : 2 * h_dim])
                n = np.tanh(gi[2 * h_dim :] + r * gh[2 * h_dim :])
                h = (1 - z) * n + z * h
            out[i, j] = h
    return out


def test_backprop_quadratic():
    p = torch.tensor([1.0, -2.0, 0.5], dtype=F64, requires_grad=True)
    backprop((p**2).sum() / 2)
    assert torch.equal(p.grad, p.detach())


def test_backprop_constant_loss():
    p = torch.randn(3, dtype=F64, requires_grad=True)
    backprop((p * 0).sum() + 3.0)
    assert torch.equal(p.grad, torch.zeros(3, dtype=F64))


def test_backprop_matmul_chain_fd():
    g = gen(1)
    a = torch.randn(4, 3, dtype=F64, generator=g, requires_grad=True)
    b = torch.randn(3, 5, dtype=F64, generator=g, requires_grad=True)
    c = torch.randn(5, 2, dtype=F64, generator=g, requires_grad=True)
    assert fd_gradient_error(lambda: torch.tanh(a @ b @ c).sum(), [a, b, c]) < 1e-4


def test_backprop_names_first_non_finite():
    x = torch.tensor([1.0], requires_grad=True)
    mid = torch.log(x - 1.0)
    loss = (mid * 2).sum()
    with pytest.raises(NonFiniteError, match="first non-finite intermediate: mid"):
        backprop(loss, [("ok", x), ("mid", mid), ("loss", loss)])


def test_gru_matches_hand_equations():
    torch.manual_seed(0)
    enc = TemporalEncoder(5).double()
    randomize_(enc, gen(2))
    x = torch.randn(2, 3, 7, dtype=F64, generator=gen(3))
    np.testing.assert_allclose(enc(x).detach().numpy(), numpy_gru(x.numpy(), enc.gru), atol=1e-12)


def test_gru_zero_window_zero_output():
    enc = TemporalEncoder(8).double()
    out = enc(torch.zeros(2, 3, 10, dtype=F64))
    assert torch.equal(out, torch.zeros(2, 3, 8, dtype=F64))


def test_gru_shared_across_entities():
    enc = TemporalEncoder(6).double()
    x = torch.randn(1, 1, 9, dtype=F64).repeat(1, 2, 1)
    out = enc(x)
    assert torch.equal(out[0, 0], out[0, 1])


@given(b=st.integers(1, 2), k=st.integers(1, 3), t=st.integers(1, 5), h=st.integers(1, 4), seed=st.integers(0, 99))
def test_gru_gradient_random_shapes(b, k, t, h, seed):
    torch.manual_seed(seed)
    enc = TemporalEncoder(h).double()
    x = torch.randn(b, k, t, dtype=F64, generator=gen(seed), requires_grad=True)
    assert fd_gradient_error(lambda: enc(x).mean(), [x, *enc.parameters()]) < 1e-4


def test_graph_single_entity():
    enc = GraphEncoder(4).double()
    g = torch.randn(3, 1, 4, dtype=F64)
    assert torch.allclose(enc.adjacency(g), torch.ones(3, 1, 1, dtype=F64))
    assert torch.allclose(enc(g), enc.weight(g) + g)


@given(seed=st.integers(0, 1000), k=st.integers(2, 7))
def test_graph_equivariant_and_stochastic(seed, k):
    torch.manual_seed(seed)
    enc = GraphEncoder(5).double()
    g = torch.randn(2, k, 5, dtype=F64, generator=gen(seed))
    perm = torch.randperm(k, generator=gen(seed + 1))
    assert torch.allclose(enc(g[:, perm]), enc(g)[:, perm], atol=1e-6)
    rows = enc.adjacency(g).sum(-1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)


@given(seed=st.integers(0, 100), k=st.integers(1, 4), h=st.integers(1, 5))
def test_graph_gradient(seed, k, h):
    torch.manual_seed(seed)
    enc = GraphEncoder(h).double()
    randomize_(enc, gen(seed))
    g = torch.randn(2, k, h, dtype=F64, generator=gen(seed + 1), requires_grad=True)
    w = torch.randn(2, k, h, dtype=F64, generator=gen(seed + 2))
    assert fd_gradient_error(lambda: (enc(g) * w).sum(), [g, *enc.parameters()]) < 1e-4


def test_head_zero_and_linear():
    head = ManifoldHead(4, 3).double()
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    y = torch.randn(2, 3, 4, dtype=F64)
    assert torch.equal(head(y), torch.zeros(2, 3, 3, dtype=F64))

    lin = ManifoldHead(4, 3, activation=False, normalize=False).double()
    assert torch.allclose(lin(2 * y), 2 * lin(y), atol=1e-12)


@given(seed=st.integers(0, 100), h=st.integers(1, 6), out=st.integers(2, 6), normalize=st.booleans())
def test_head_gradient(seed, h, out, normalize):
    torch.manual_seed(seed)
    head = ManifoldHead(h, out, normalize=normalize).double()
    y = torch.randn(2, 3, h, dtype=F64, generator=gen(seed), requires_grad=True)
    assume(head_kink_margin(head, y) > KINK_MARGIN)
    w = torch.randn(2, 3, out, dtype=F64, generator=gen(seed + 1))
    assert fd_gradient_error(lambda: (head(y) * w).sum(), [y, *head.parameters()]) < 1e-4


def test_head_output_normalized():
    torch.manual_seed(0)
    head = ManifoldHead(4, 5).double()
    z = head(1e4 * torch.randn(3, 2, 4, dtype=F64))
    assert torch.allclose(z.mean(-1), torch.zeros(3, 2, dtype=F64), atol=1e-9)
    assert torch.allclose(z.pow(2).mean(-1), torch.ones(3, 2, dtype=F64), atol=1e-6)
    with pytest.raises(ValueError):
        ManifoldHead(4, 1)


def test_forward_deterministic():
    torch.manual_seed(0)
    enc = TemporalEncoder(4).double()
    x = torch.randn(3, 2, 6, dtype=F64)
    assert torch.equal(enc(x), enc(x))


def test_checkpoint_round_trip(tmp_path):
    state = {
        "w": torch.randn(3, 4),
        "v": torch.randn(5, dtype=F64),
        "n": torch.arange(6).reshape(2, 3),
        "s": torch.tensor(1.5),
    }
    save_checkpoint(state, tmp_path / "ck", {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "x"}
    for name, t in state.items():
        assert back[name].dtype == t.dtype
        assert back[name].shape == t.shape
        assert back[name].numpy().tobytes() == t.numpy().tobytes()
    layout = json.loads((tmp_path / "ck" / "checkpoint.json").read_text())
    assert [e["name"] for e in layout["parameters"]] == list(state)
    assert {e["dtype"] for e in layout["parameters"]} == {"<f4", "<f8", "<i8"}
    assert sum(e["nbytes"] for e in layout["parameters"]) == (tmp_path / "ck" / "checkpoint.bin").stat().st_size


def test_checkpoint_rejects_unknown_format(tmp_path):
    save_checkpoint({"w": torch.zeros(1)}, tmp_path)
    doc = json.loads((tmp_path / "checkpoint.json").read_text())
    doc["format"] = 99
    (tmp_path / "checkpoint.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(tmp_path)
