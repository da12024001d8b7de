import numpy as np
import pytest
import torch

from actiondiff.attention import (
    AttentionLayer,
    ResidualAttention,
    TokenMLP,
    scaled_dot_attention,
    spatial_apply,
    temporal_apply,
)
from actiondiff.errors import ContractError, NumericError
from conftest import finite_diff_grads, max_rel_err


def _layer(d_in=4, heads=2, d_head=3, seed=0, **kw):
    return AttentionLayer(d_in, heads, d_head, torch.Generator().manual_seed(seed), **kw)


def test_single_key_softmax_is_identity_weight():
    layer = _layer()
    q = torch.randn(3, 4, generator=torch.Generator().manual_seed(1))
    kv = torch.randn(1, 4, generator=torch.Generator().manual_seed(2))
    out, scores = layer(q, kv, return_scores=True)
    assert torch.allclose(scores, torch.ones_like(scores))
    expected = layer.w_o(layer.w_v(kv)).expand(3, -1)
    assert torch.allclose(out, expected, atol=1e-6)


def test_identical_keys_give_uniform_weights():
    layer = _layer()
    q = torch.randn(2, 4, generator=torch.Generator().manual_seed(3))
    kv = torch.randn(1, 4, generator=torch.Generator().manual_seed(4)).repeat(5, 1)
    out, scores = layer(q, kv, return_scores=True)
    assert torch.allclose(scores, torch.full_like(scores, 0.2), atol=1e-6)
    expected = layer.w_o(layer.w_v(kv[:1])).expand(2, -1)
    assert torch.allclose(out, expected, atol=1e-6)


def test_against_straight_line_transcription():
    # oracle: single-head attention written out in numpy
    layer = _layer(d_in=3, heads=1, d_head=2, seed=7)
    gen = torch.Generator().manual_seed(8)
    q_src = torch.randn(2, 3, generator=gen)
    kv_src = torch.randn(3, 3, generator=gen)
    out, scores = layer(q_src, kv_src, return_scores=True)

    wq = layer.w_q.weight.detach().numpy()
    wk = layer.w_k.weight.detach().numpy()
    wv = layer.w_v.weight.detach().numpy()
    wo = layer.w_o.weight.detach().numpy()
    q = q_src.numpy() @ wq.T
    k = kv_src.numpy() @ wk.T
    v = kv_src.numpy() @ wv.T
    logits = q @ k.T / np.sqrt(2.0)
    w = np.exp(logits)
    w = w / w.sum(axis=1, keepdims=True)
    expected = (w @ v) @ wo.T
    assert np.allclose(out.detach().numpy(), expected, atol=1e-6)
    assert np.allclose(scores[0].detach().numpy(), w, atol=1e-6)


def test_scores_are_row_stochastic():
    layer = _layer(seed=9)
    gen = torch.Generator().manual_seed(10)
    q = torch.randn(2, 6, 4, generator=gen)
    kv = torch.randn(2, 5, 4, generator=gen)
    _, scores = layer(q, kv, return_scores=True)
    assert scores.shape == (2, 2, 6, 5)
    assert (scores >= 0).all()
    assert torch.allclose(scores.sum(dim=-1), torch.ones(2, 2, 6), atol=1e-6)


def test_functional_wrapper():
    layer = _layer()
    q = torch.randn(2, 4, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(scaled_dot_attention(q, q, layer), layer(q, q))


def test_contract_errors():
    layer = _layer()
    with pytest.raises(ContractError):
        layer(torch.zeros(0, 4), torch.zeros(2, 4))
    with pytest.raises(ContractError):
        layer(torch.zeros(2, 4), torch.zeros(0, 4))
    with pytest.raises(NumericError):
        layer(torch.zeros(1, 4), torch.full((1, 4), torch.inf))


def test_zero_out_projection():
    layer = _layer(zero_out=True)
    q = torch.randn(3, 4, generator=torch.Generator().manual_seed(11))
    assert torch.equal(layer(q, q), torch.zeros(3, 4))


def _tokens_layer():
    layer = _layer(d_in=5, heads=1, d_head=4, seed=12)
    return lambda tok: layer(tok)


def test_spatial_apply_matches_per_frame_loop():
    f = _tokens_layer()
    gen = torch.Generator().manual_seed(13)
    x = torch.randn(2, 3, 5, 2, 2, generator=gen)
    out = spatial_apply(x, f)
    assert out.shape == x.shape
    for b in range(2):
        for d in range(3):
            tokens = x[b, d].reshape(5, 4).T  # [(h w), c]
            want = f(tokens)
            got = out[b, d].reshape(5, 4).T
            assert torch.allclose(got, want, atol=1e-6)


def test_temporal_apply_matches_per_site_loop():
    f = _tokens_layer()
    gen = torch.Generator().manual_seed(14)
    x = torch.randn(2, 3, 5, 2, 2, generator=gen)
    out = temporal_apply(x, f)
    assert out.shape == x.shape
    for b in range(2):
        for i in range(2):
            for j in range(2):
                tokens = x[b, :, :, i, j]  # [D, c]
                want = f(tokens)
                assert torch.allclose(out[b, :, :, i, j], want, atol=1e-6)


def test_spatial_apply_frame_permutation_equivariance():
    f = _tokens_layer()
    gen = torch.Generator().manual_seed(15)
    x = torch.randn(1, 4, 5, 2, 2, generator=gen)
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.equal(
        spatial_apply(x, f)[:, perm], spatial_apply(x[:, perm], f)
    )


def test_temporal_apply_site_permutation_equivariance():
    f = _tokens_layer()
    gen = torch.Generator().manual_seed(16)
    x = torch.randn(1, 3, 5, 1, 4, generator=gen)
    perm = torch.tensor([3, 1, 0, 2])
    assert torch.equal(
        temporal_apply(x, f)[..., perm], temporal_apply(x[..., perm], f)
    )


def test_single_frame_spatial_apply():
    f = _tokens_layer()
    x = torch.randn(2, 1, 5, 2, 2, generator=torch.Generator().manual_seed(17))
    out = spatial_apply(x, f)
    tokens = x[0, 0].reshape(5, 4).T
    assert torch.allclose(out[0, 0].reshape(5, 4).T, f(tokens), atol=1e-6)


def test_single_site_temporal_apply():
    f = _tokens_layer()
    x = torch.randn(2, 4, 5, 1, 1, generator=torch.Generator().manual_seed(18))
    out = temporal_apply(x, f)
    assert torch.allclose(out[1, :, :, 0, 0], f(x[1, :, :, 0, 0]), atol=1e-6)


def test_rel_bias_changes_attention_when_offset_dependent():
    layer = _layer(rel_bias=True, seed=19)
    q = torch.randn(4, 4, generator=torch.Generator().manual_seed(20))
    base = layer(q, q)
    with torch.no_grad():
        # constant shifts cancel in the softmax; an offset-dependent one must not
        layer.rel_bias += 0.5
        assert torch.allclose(layer(q, q), base, atol=1e-6)
        layer.rel_bias[:, : layer.rel_bias.shape[1] // 2] += 2.0
    assert not torch.allclose(layer(q, q), base)


def test_rel_bias_supports_any_context_length():
    layer = _layer(rel_bias=True, seed=21)
    q = torch.randn(4, 4, generator=torch.Generator().manual_seed(22))
    for n in (1, 8, 80):  # beyond the clamp window
        kv = torch.randn(n, 4, generator=torch.Generator().manual_seed(n))
        assert layer(q, kv).shape == (4, 4)


def test_gradients_match_finite_differences():
    torch.manual_seed(23)
    layer = AttentionLayer(
        3, 1, 2, torch.Generator().manual_seed(23), d_out=2
    ).double()
    gen = torch.Generator().manual_seed(24)
    q = torch.randn(2, 3, generator=gen, dtype=torch.float64)
    kv = torch.randn(3, 3, generator=gen, dtype=torch.float64)
    weights = torch.randn(2, 2, generator=gen, dtype=torch.float64)

    params = list(layer.parameters())
    assert sum(p.numel() for p in params) <= 64

    def loss_fn():
        return (layer(q, kv) * weights).sum()

    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params)
    numeric = finite_diff_grads(params, loss_fn)
    assert max_rel_err(analytic, numeric) <= 1e-4


def test_residual_attention_and_mlp_shapes():
    gen = torch.Generator().manual_seed(25)
    ra = ResidualAttention(6, 2, 3, gen, kv_dim=4)
    mlp = TokenMLP(6, gen)
    x = torch.randn(2, 5, 6, generator=gen)
    ctx = torch.randn(2, 3, 4, generator=gen)
    assert ra(x, ctx).shape == x.shape
    assert mlp(x).shape == x.shape
    ra(x, ctx, return_scores=True)
    assert ra.last_scores.shape == (2, 2, 5, 3)
