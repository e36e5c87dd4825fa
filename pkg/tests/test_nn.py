import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from kptlm.errors import ConfigError, EmptySupervisionError, NonFiniteGradientError, ShapeError
from kptlm.nn import (
    AdamWState,
    AdapterPair,
    adamw_step,
    causal_attention,
    clip_grad_norm,
    embedding_lookup,
    gelu,
    layernorm,
    linear,
    load_checkpoint,
    log_softmax,
    mlp_block,
    read_header,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
)
from kptlm.nn.gradcheck import max_relative_error

CASES = 20


def _t(g, *shape):
    return torch.tensor(g.standard_normal(shape))


def test_linear_matches_reference():
    g = np.random.default_rng(0)
    x, w, b = _t(g, 3, 4), _t(g, 4, 5), _t(g, 5)
    ad = AdapterPair(_t(g, 4, 2), _t(g, 2, 5), 2.0)
    ref = x.numpy() @ (w.numpy() + 2.0 * ad.down.numpy() @ ad.up.numpy()) + b.numpy()
    np.testing.assert_allclose(linear(x, w, b, ad).numpy(), ref, rtol=1e-12)


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        linear(torch.zeros(2, 3), torch.zeros(4, 5))


def test_adapter_rank_validation():
    with pytest.raises(ShapeError):
        AdapterPair(torch.zeros(4, 2), torch.zeros(3, 5))
    with pytest.raises(ConfigError):
        AdapterPair(torch.zeros(2, 3), torch.zeros(3, 5))


def test_ops_agree_with_torch_functional():
    g = np.random.default_rng(1)
    x = _t(g, 4, 6)
    gamma, beta = _t(g, 6), _t(g, 6)
    np.testing.assert_allclose(gelu(x), F.gelu(x), atol=1e-12)
    np.testing.assert_allclose(softmax(x), F.softmax(x, -1), atol=1e-12)
    np.testing.assert_allclose(log_softmax(x), F.log_softmax(x, -1), atol=1e-12)
    np.testing.assert_allclose(layernorm(x, gamma, beta), F.layer_norm(x, (6,), gamma, beta, 1e-5), atol=1e-12)


def test_attention_agrees_with_sdpa():
    g = np.random.default_rng(2)
    D, H, n = 8, 2, 5
    x = _t(g, 2, n, D)
    wq, wk, wv, wo = (_t(g, D, D) for _ in range(4))
    out = causal_attention(x, H, wq, wk, wv, wo)
    q, k, v = ((x @ w).reshape(2, n, H, D // H).transpose(1, 2) for w in (wq, wk, wv))
    ref = F.scaled_dot_product_attention(q, k, v, is_causal=True).transpose(1, 2).reshape(2, n, D) @ wo
    np.testing.assert_allclose(out.numpy(), ref.numpy(), atol=1e-10)


def test_attention_heads_must_divide_width():
    with pytest.raises(ConfigError):
        w = torch.zeros(6, 6)
        causal_attention(torch.zeros(3, 6), 4, w, w, w, w)


def test_attention_past_matches_full():
    g = np.random.default_rng(3)
    D = 8
    x = _t(g, 1, 6, D)
    ws = [_t(g, D, D) for _ in range(4)]
    full = causal_attention(x, 2, *ws)
    first, _, kv = causal_attention(x[:, :4], 2, *ws, return_weights=True)
    rest = causal_attention(x[:, 4:], 2, *ws, past=kv)
    np.testing.assert_allclose(torch.cat([first, rest], 1).numpy(), full.numpy(), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 6), st.integers(0, 1000))
def test_attention_is_causal(n, j, seed):
    j = min(j, n - 1)
    g = np.random.default_rng(seed)
    D = 4
    x = _t(g, n, D)
    ws = [_t(g, D, D) for _ in range(4)]
    out = causal_attention(x, 2, *ws)
    x2 = x.clone()
    x2[j] += 5.0
    out2 = causal_attention(x2, 2, *ws)
    np.testing.assert_array_equal(out[:j].numpy(), out2[:j].numpy())


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 1000))
def test_attention_rows_sum_to_one(n, seed):
    g = np.random.default_rng(seed)
    ws = [_t(g, 4, 4) for _ in range(4)]
    _, w, _ = causal_attention(_t(g, n, 4), 2, *ws, return_weights=True)
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-12)
    assert float(torch.triu(w[0, 0], 1).abs().sum()) == 0.0


def test_softmax_is_shift_stable():
    x = torch.tensor([1000.0, 1001.0, 999.0], dtype=torch.float64)
    p = softmax(x)
    assert torch.isfinite(p).all()
    np.testing.assert_allclose(p.numpy(), softmax(x - 1000).numpy(), rtol=1e-12)


def test_embedding_range():
    with pytest.raises(ShapeError):
        embedding_lookup(torch.tensor([5]), torch.zeros(5, 2))


def test_cross_entropy_masked_positions_are_exact_zero():
    g = np.random.default_rng(4)
    logits = _t(g, 5, 7)
    targets = torch.tensor([1, 2, 3, 4, 5])
    mask = torch.tensor([0, 1, 0, 1, 0], dtype=torch.float64)
    base = softmax_cross_entropy(logits, targets, mask)
    wild = logits.clone()
    wild[[0, 2, 4]] = torch.tensor([1e30, -1e30, 0.0] + [0.0] * 4, dtype=torch.float64)[:7]
    assert float(softmax_cross_entropy(wild, targets, mask)) == float(base)
    ref = -(F.log_softmax(logits, -1)[[1, 3], targets[[1, 3]]]).mean()
    assert float(base) == pytest.approx(float(ref), rel=1e-12)


def test_cross_entropy_errors():
    with pytest.raises(EmptySupervisionError):
        softmax_cross_entropy(torch.zeros(2, 3), torch.zeros(2, dtype=torch.long), torch.zeros(2))
    with pytest.raises(ValueError):
        softmax_cross_entropy(torch.zeros(2, 3), torch.zeros(2, dtype=torch.long), torch.tensor([0.5, 1.0]))
    with pytest.raises(ShapeError):
        softmax_cross_entropy(torch.zeros(2, 3), torch.zeros(3, dtype=torch.long), torch.ones(3))


# -- gradient checks (float64, central differences) ------------------------------------

@pytest.mark.parametrize("seed", range(CASES))
def test_gradients_elementwise_and_norm(seed):
    g = np.random.default_rng(seed)
    x, gamma, beta = _t(g, 3, 5), _t(g, 5), _t(g, 5)
    w = _t(g, 3, 5)
    assert max_relative_error(lambda a: (gelu(a) * w).sum(), [x]) < 1e-4
    assert max_relative_error(lambda a: (softmax(a) * w).sum(), [x]) < 1e-4
    assert max_relative_error(lambda a: (log_softmax(a) * w).sum(), [x]) < 1e-4
    assert max_relative_error(lambda a, gm, bt: (layernorm(a, gm, bt) * w).sum(), [x, gamma, beta]) < 1e-4


@pytest.mark.parametrize("seed", range(CASES))
def test_gradients_linear_mlp_embedding(seed):
    g = np.random.default_rng(100 + seed)
    x, wt, b = _t(g, 3, 4), _t(g, 4, 5), _t(g, 5)
    down, up = _t(g, 4, 2), _t(g, 2, 5)
    r = _t(g, 3, 5)
    f = lambda a, w_, b_, d, u: (linear(a, w_, b_, AdapterPair(d, u, 2.0)) * r).sum()  # noqa: E731
    assert max_relative_error(f, [x, wt, b, down, up]) < 1e-4
    w1, b1, w2, b2 = _t(g, 4, 6), _t(g, 6), _t(g, 6, 5), _t(g, 5)
    assert max_relative_error(lambda *a: (mlp_block(*a) * r).sum(), [x, w1, b1, w2, b2]) < 1e-4
    ids = torch.tensor([0, 2, 2, 1])
    table = _t(g, 3, 4)
    q = _t(g, 4, 4)
    assert max_relative_error(lambda t: (embedding_lookup(ids, t) * q).sum(), [table]) < 1e-4


@pytest.mark.parametrize("seed", range(CASES))
def test_gradients_attention(seed):
    g = np.random.default_rng(200 + seed)
    D, n = 4, 3
    x = _t(g, n, D)
    ws = [_t(g, D, D) * 0.5 for _ in range(4)]
    bs = [_t(g, D) for _ in range(4)]
    qd, qu, vd, vu = _t(g, D, 1), _t(g, 1, D), _t(g, D, 1), _t(g, 1, D)
    r = _t(g, n, D)

    def f(x_, wq, wk, wv, wo, bq, bk, bv, bo, qd_, qu_, vd_, vu_):
        out = causal_attention(x_, 2, wq, wk, wv, wo, bq, bk, bv, bo,
                               AdapterPair(qd_, qu_, 2.0), AdapterPair(vd_, vu_, 2.0))
        return (out * r).sum()

    assert max_relative_error(f, [x, *ws, *bs, qd, qu, vd, vu]) < 1e-4


@pytest.mark.parametrize("seed", range(CASES))
def test_gradients_cross_entropy(seed):
    g = np.random.default_rng(300 + seed)
    logits = _t(g, 6, 5)
    targets = torch.tensor(g.integers(0, 5, 6))
    mask = torch.tensor(g.integers(0, 2, 6), dtype=torch.float64)
    mask[0] = 1
    assert max_relative_error(lambda z: softmax_cross_entropy(z, targets, mask), [logits]) < 1e-4


# -- optimizer ---------------------------------------------------------------------------

def _adamw_reference(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, gr in enumerate(grads, 1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * gr
        v = b2 * v + (1 - b2) * gr * gr
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adamw_matches_reference():
    g = np.random.default_rng(5)
    p0 = g.standard_normal(6)
    grads = [g.standard_normal(6) for _ in range(5)]
    p = torch.tensor(p0.copy())
    state = AdamWState()
    for gr in grads:
        adamw_step({"p": p}, {"p": torch.tensor(gr)}, state, lr=0.01, weight_decay=0.1)
    np.testing.assert_allclose(p.numpy(), _adamw_reference(p0, grads, 0.01, wd=0.1), rtol=1e-12)
    assert state.step_count == 5


def test_adamw_agrees_with_torch():
    g = np.random.default_rng(6)
    a = torch.tensor(g.standard_normal(4), requires_grad=True)
    b = a.detach().clone()
    opt = torch.optim.AdamW([a], lr=0.02, weight_decay=0.05)
    state = AdamWState()
    for _ in range(4):
        gr = torch.tensor(g.standard_normal(4))
        a.grad = gr.clone()
        opt.step()
        adamw_step({"b": b}, {"b": gr}, state, lr=0.02, weight_decay=0.05)
    np.testing.assert_allclose(b.numpy(), a.detach().numpy(), rtol=1e-10)


def test_adamw_refuses_non_finite_gradient_without_touching_params():
    p = torch.ones(3)
    q = torch.ones(2)
    with pytest.raises(NonFiniteGradientError) as e:
        adamw_step({"p": p, "q": q}, {"p": torch.ones(3), "q": torch.tensor([1.0, math.nan])}, AdamWState(), 0.1)
    assert e.value.name == "q"
    assert torch.equal(p, torch.ones(3))


def test_clip_grad_norm():
    grads = {"a": torch.tensor([3.0, 4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert float(grads["a"].norm()) == pytest.approx(1.0, abs=1e-5)


# -- checkpoints -------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    g = np.random.default_rng(7)
    tensors = {"b": torch.tensor(g.standard_normal((3, 2)), dtype=torch.float32),
               "a": torch.tensor(g.standard_normal(5), dtype=torch.float32)}
    path = save_checkpoint(tmp_path / "x.ckpt", tensors, {"note": "hi"})
    loaded, meta = load_checkpoint(path)
    assert meta["note"] == "hi"
    for k in tensors:
        assert torch.equal(loaded[k], tensors[k])
    header = read_header(path)
    assert [t["name"] for t in header["tensors"]] == sorted(tensors)
    save_checkpoint(tmp_path / "y.ckpt", dict(reversed(list(tensors.items()))), {"note": "hi"})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
