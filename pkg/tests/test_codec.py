import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from actiondiff.codec import CodecSpec, decode, encode, latent_shape
from actiondiff.errors import ContractError


def test_constant_video_centers_to_zero():
    v = torch.full((3, 1, 4, 4), 0.5)
    assert torch.equal(encode(v), torch.zeros(3, 4, 2, 2))


def test_patch_to_channel_order():
    v = torch.tensor([[[[0.1, 0.2], [0.3, 0.4]]]])  # [1, 1, 2, 2]
    z = encode(v)
    assert z.shape == (1, 4, 1, 1)
    expected = [2 * 0.1 - 1, 2 * 0.2 - 1, 2 * 0.3 - 1, 2 * 0.4 - 1]
    assert torch.allclose(z[0, :, 0, 0], torch.tensor(expected))


def test_round_trip_exact():
    gen = torch.Generator().manual_seed(0)
    v = torch.rand(8, 1, 16, 16, generator=gen)
    assert torch.equal(decode(encode(v)), v)


def test_affine_linearity():
    gen = torch.Generator().manual_seed(1)
    v = torch.rand(2, 1, 4, 4, generator=gen)
    zero = encode(torch.zeros_like(v))
    for alpha in (0.25, 0.5, 1.0):
        lhs = encode(alpha * v) - zero
        rhs = alpha * (encode(v) - zero)
        assert torch.allclose(lhs, rhs, atol=1e-6)


def test_decode_clamps():
    z = torch.full((1, 4, 1, 1), 3.0)
    assert decode(z).max() == 1.0
    z = torch.full((1, 4, 1, 1), -3.0)
    assert decode(z).min() == 0.0


def test_contract_errors():
    with pytest.raises(ContractError):
        encode(torch.zeros(1, 1, 3, 4))  # odd height
    with pytest.raises(ContractError):
        encode(torch.zeros(1, 2, 4, 4))  # wrong channel count
    with pytest.raises(ContractError):
        encode(torch.zeros(4, 4))
    with pytest.raises(ContractError):
        decode(torch.zeros(1, 3, 2, 2))
    with pytest.raises(ContractError):
        CodecSpec(patch=2, in_channels=1, latent_channels=3)


def test_latent_shape_helper():
    assert latent_shape(8, 16, 16) == (8, 4, 8, 8)


@settings(max_examples=30, deadline=None)
@given(
    d=st.integers(1, 6),
    h=st.sampled_from([2, 4, 8, 16]),
    w=st.sampled_from([2, 4, 8, 16]),
    seed=st.integers(0, 10_000),
)
def test_round_trip_property(d, h, w, seed):
    gen = torch.Generator().manual_seed(seed)
    v = torch.rand(d, 1, h, w, generator=gen)
    assert (decode(encode(v)) - v).abs().max() <= 1e-6
