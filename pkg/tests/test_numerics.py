import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from astsim.numerics import (MLP, AdamState, CrossAttnBlock, DivergenceError, GEGLUFeedForward,
                             MultiHeadAttention, PosEmb, RWFLinear, SelfAttnBlock, adam_step, attention,
                             grad_check, layer_norm)


@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def test_rwf_weight_is_scaled_direction():
    lin = RWFLinear(4, 3)
    with torch.no_grad():
        lin.s.copy_(torch.tensor([0.0, math.log(2.0), -1.0]))
    W = lin.weight.detach()
    V = lin.V.detach()
    torch.testing.assert_close(W, torch.stack([V[0], 2 * V[1], math.exp(-1) * V[2]]))
    x = torch.randn(5, 4)
    torch.testing.assert_close(lin(x), x @ W.T + lin.bias)
    bound = math.sqrt(6 / 7)
    assert float(V.abs().max()) <= bound
    with pytest.raises(ValueError):
        lin(torch.randn(2, 5))


def test_layer_norm_statistics():
    x = torch.randn(6, 32) * 5 + 3
    y = layer_norm(x)
    torch.testing.assert_close(y.mean(-1), torch.zeros(6), atol=1e-12, rtol=0)
    var = x.var(-1, unbiased=False)
    torch.testing.assert_close(y.var(-1, unbiased=False), var / (var + 1e-5))
    with pytest.raises(ValueError):
        layer_norm(torch.zeros(3, 0))


def test_layer_norm_constant_rows_are_finite():
    y = layer_norm(torch.full((2, 8), 7.0))
    assert torch.all(y == 0)


def test_attention_identical_keys_average_values():
    q = torch.randn(3, 4)
    k = torch.ones(5, 4)
    v = torch.randn(5, 2)
    torch.testing.assert_close(attention(q, k, v), v.mean(0).expand(3, 2))


def test_attention_single_valid_key_copies_value():
    q, k, v = torch.randn(3, 4), torch.randn(5, 4), torch.randn(5, 2)
    mask = torch.zeros(3, 5, dtype=torch.bool)
    mask[:, 2] = True
    torch.testing.assert_close(attention(q, k, v, mask), v[2].expand(3, 2))


def test_attention_closed_form_two_keys():
    q = torch.tensor([[1.0, 0.0]])
    k = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    v = torch.tensor([[1.0], [0.0]])
    w = 1 / (1 + math.exp(-1 / math.sqrt(2)))
    out, weights = attention(q, k, v, return_weights=True)
    assert abs(float(out) - w) < 1e-12
    torch.testing.assert_close(weights.sum(-1), torch.ones(1))


def test_attention_width_errors():
    with pytest.raises(ValueError):
        attention(torch.randn(2, 3), torch.randn(4, 2), torch.randn(4, 1))
    with pytest.raises(ValueError):
        attention(torch.randn(2, 3), torch.randn(4, 3), torch.randn(5, 1))


def test_attention_chunked_matches_full():
    import astsim.numerics as num
    q, k, v = torch.randn(2, 70, 8), torch.randn(2, 90, 8), torch.randn(2, 90, 3)
    mask = torch.rand(2, 1, 90) > 0.3
    full = num._attention_full(q, k, v, mask, 0.0, False, False)
    old = num._ATTN_CHUNK
    try:
        num._ATTN_CHUNK = 1000
        with torch.no_grad():
            chunked = attention(q, k, v, mask)
    finally:
        num._ATTN_CHUNK = old
    torch.testing.assert_close(chunked, full)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_self_attention_is_permutation_equivariant(seed):
    torch.manual_seed(seed)
    blk = SelfAttnBlock(16, heads=2, head_dim=8, ffn_hidden=32, dropout=0.0).double()
    x = torch.randn(7, 16)
    perm = torch.randperm(7)
    torch.testing.assert_close(blk(x)[perm], blk(x[perm]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_cross_attention_invariant_to_context_order(seed):
    torch.manual_seed(seed)
    blk = CrossAttnBlock(16, heads=2, head_dim=8, ffn_hidden=32, dropout=0.0).double()
    q, ctx = torch.randn(4, 16), torch.randn(9, 16)
    mask = torch.rand(9) > 0.3
    mask[0] = True
    perm = torch.randperm(9)
    torch.testing.assert_close(blk(q, ctx, mask), blk(q, ctx[perm], mask[perm]))


def test_masked_context_has_no_effect():
    torch.manual_seed(0)
    blk = CrossAttnBlock(16, heads=2, head_dim=8, ffn_hidden=32, dropout=0.0).double()
    q, ctx = torch.randn(4, 16), torch.randn(6, 16)
    mask = torch.tensor([True, True, True, False, False, False])
    junk = ctx.clone()
    junk[3:] = 1e3 * torch.randn(3, 16)
    torch.testing.assert_close(blk(q, ctx, mask), blk(q, junk, mask))
    torch.testing.assert_close(blk(q, ctx, mask), blk(q, ctx[:3]))
    with pytest.raises(ValueError):
        blk(q, torch.randn(6, 8))


def test_mha_heads_match_manual_split():
    torch.manual_seed(1)
    mha = MultiHeadAttention(8, heads=2, head_dim=3).double()
    x = torch.randn(5, 8)
    q, k, v = mha.to_q(x), mha.to_k(x), mha.to_v(x)
    heads = [torch.softmax(q[:, h * 3:(h + 1) * 3] @ k[:, h * 3:(h + 1) * 3].T / math.sqrt(3), -1)
             @ v[:, h * 3:(h + 1) * 3] for h in range(2)]
    torch.testing.assert_close(mha(x, x, x), mha.to_out(torch.cat(heads, -1)))


def test_geglu_closed_form():
    ff = GEGLUFeedForward(4, 6).double()
    x = torch.randn(3, 4)
    a = x @ ff.w.weight.T
    gelu = 0.5 * a * (1 + torch.erf(a / math.sqrt(2)))
    torch.testing.assert_close(ff(x), (gelu * (x @ ff.v.weight.T)) @ ff.w2.weight.T)


def test_pos_emb_frequencies_and_shape():
    pe = PosEmb(10).double()
    torch.testing.assert_close(pe.freqs, math.pi * 2.0 ** torch.arange(16.0))
    p = torch.tensor([[0.5, -0.25, 0.0]])
    f = pe.fourier(p)
    assert f.shape == (1, 96)
    torch.testing.assert_close(f[0, :16], torch.sin(0.5 * pe.freqs))
    torch.testing.assert_close(f[0, 80:], torch.ones(16))
    x = torch.zeros(1, 10)
    torch.testing.assert_close(pe(x, p), pe.proj(f))
    assert "freqs" not in pe.state_dict()


def numpy_adam(x, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_reference_on_quadratic():
    A = np.diag([1.0, 4.0, 0.25])
    x0 = np.array([1.0, -2.0, 3.0])
    p = torch.tensor(x0.copy(), requires_grad=True)
    st_ = AdamState()
    for _ in range(200):
        g = torch.tensor(A @ p.detach().numpy())
        adam_step(st_, [p], [g], lr=0.05)
    ref = numpy_adam(x0, lambda x: A @ x, 0.05, 200)
    np.testing.assert_allclose(p.detach().numpy(), ref, rtol=1e-12, atol=1e-14)
    assert st_.step == 200
    assert np.linalg.norm(ref) < 0.1 * np.linalg.norm(x0)


def test_adam_first_step_is_lr_times_sign():
    p = torch.tensor([1.0, -1.0])
    adam_step(AdamState(), [p], [torch.tensor([3.0, -0.5])], lr=0.1)
    torch.testing.assert_close(p, torch.tensor([0.9, -0.9]), atol=1e-7, rtol=0)


def test_adam_refuses_non_finite():
    p = torch.zeros(2)
    st_ = AdamState()
    with pytest.raises(DivergenceError, match="diverged"):
        adam_step(st_, [p], [torch.tensor([1.0, float("nan")])], lr=0.1)
    assert torch.all(p == 0)
    with pytest.raises(ValueError):
        adam_step(st_, [p], [torch.zeros(3)], lr=0.1)


def test_grad_check_accepts_correct_gradients():
    torch.manual_seed(0)
    mlp = MLP(4, 8, 3, layer_norm=True).double()
    x = torch.randn(5, 4)
    assert grad_check(lambda x: mlp(x), [x]) < 1e-6
    params = list(mlp.parameters())
    f = lambda *ps: torch.func.functional_call(mlp, dict(zip([n for n, _ in mlp.named_parameters()], ps)), (x,))
    assert grad_check(f, params, directions=10) < 1e-6


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x ** 2

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x


def test_grad_check_rejects_wrong_gradients():
    x = torch.randn(6)
    assert grad_check(_WrongGrad.apply, [x]) > 0.1
    assert grad_check(_WrongGrad.apply, [x], directions=5) > 0.1


def test_grad_check_survives_relu_kink():
    x = torch.tensor([1e-7, -3e-7, 0.5])
    assert grad_check(torch.relu, [x]) < 1e-6
