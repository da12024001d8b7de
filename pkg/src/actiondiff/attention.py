"""Multi-head attention primitives and the spatial/temporal folding wrappers.

Factorization convention for feature maps laid out [B, D, c, h, w]:

- spatial attention folds frames into the batch and attends over h*w sites;
- temporal attention folds sites into the batch and attends over D frames.

Every attention and MLP used by the prism and the backbone is pre-normalized
and residual. Relative positions enter as a learned per-head additive logit
bias indexed by clamped key-query offset, so any context length works.
"""

from __future__ import annotations

import math
from functools import lru_cache

import torch
from einops import rearrange
from torch import nn

from .errors import ContractError, NumericError

MAX_REL_OFFSET = 32


@lru_cache(maxsize=256)
def _offset_index(nq: int, nk: int) -> torch.Tensor:
    offset = torch.arange(nk)[None, :] - torch.arange(nq)[:, None]
    return offset.clamp(-MAX_REL_OFFSET, MAX_REL_OFFSET) + MAX_REL_OFFSET


def init_linear_(layer: nn.Linear, gen: torch.Generator) -> nn.Linear:
    """Uniform(-1/sqrt(fan_in), ..) init drawn from an explicit generator."""
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)
    return layer


def zero_linear_(layer: nn.Linear) -> nn.Linear:
    with torch.no_grad():
        layer.weight.zero_()
        if layer.bias is not None:
            layer.bias.zero_()
    return layer


class AttentionLayer(nn.Module):
    """Scaled dot-product attention with per-head projections.

    Self-attention is the ``kv_src is q_src`` case. ``kv_dim`` lets keys and
    values come from a stream of different width (text tokens, action
    features). ``zero_out`` zeroes the output projection so a fresh layer is
    an exact no-op inside a residual branch.
    """

    def __init__(
        self,
        d_in: int,
        heads: int,
        d_head: int,
        gen: torch.Generator,
        d_out: int | None = None,
        kv_dim: int | None = None,
        rel_bias: bool = False,
        zero_out: bool = False,
    ):
        super().__init__()
        self.heads = heads
        self.d_head = d_head
        inner = heads * d_head
        kv_dim = kv_dim if kv_dim is not None else d_in
        self.w_q = init_linear_(nn.Linear(d_in, inner, bias=False), gen)
        self.w_k = init_linear_(nn.Linear(kv_dim, inner, bias=False), gen)
        self.w_v = init_linear_(nn.Linear(kv_dim, inner, bias=False), gen)
        self.w_o = init_linear_(nn.Linear(inner, d_out or d_in, bias=False), gen)
        if zero_out:
            zero_linear_(self.w_o)
        if rel_bias:
            self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * MAX_REL_OFFSET + 1))
        else:
            self.rel_bias = None

    def forward(
        self,
        q_src: torch.Tensor,
        kv_src: torch.Tensor | None = None,
        return_scores: bool = False,
    ):
        """[.., Nq, d_in] queries against [.., Nk, kv_dim] keys/values.

        Returns the attended sequence, or ``(sequence, scores)`` with
        row-stochastic scores [.., heads, Nq, Nk] when ``return_scores``.
        """
        if kv_src is None:
            kv_src = q_src
        unbatched = q_src.dim() == 2
        if unbatched:
            q_src = q_src[None]
            kv_src = kv_src[None]
        if q_src.shape[-2] == 0 or kv_src.shape[-2] == 0:
            raise ContractError("attention over an empty token sequence")
        if kv_src.shape[0] != q_src.shape[0]:
            raise ContractError(
                f"batch mismatch: {q_src.shape[0]} queries vs {kv_src.shape[0]} contexts"
            )

        q = rearrange(self.w_q(q_src), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.w_k(kv_src), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.w_v(kv_src), "b n (h d) -> b h n d", h=self.heads)

        logits = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        if self.rel_bias is not None:
            offset = _offset_index(logits.shape[-2], logits.shape[-1])
            logits = logits + self.rel_bias[:, offset]
        if not torch.isfinite(logits.detach().sum()):
            raise NumericError("non-finite attention logits")

        scores = torch.softmax(logits, dim=-1)
        out = scores @ v
        out = self.w_o(rearrange(out, "b h n d -> b n (h d)"))
        if unbatched:
            out, scores = out[0], scores[0]
        return (out, scores) if return_scores else out


def scaled_dot_attention(q_src, kv_src, layer: AttentionLayer, return_scores=False):
    """Functional form of :class:`AttentionLayer`."""
    return layer(q_src, kv_src, return_scores=return_scores)


def spatial_apply(x: torch.Tensor, layer) -> torch.Tensor:
    """Apply a token-sequence layer per (batch, frame) over the h*w sites."""
    _check_map(x)
    b, d, c, h, w = x.shape
    tokens = rearrange(x, "b d c h w -> (b d) (h w) c")
    out = layer(tokens)
    return rearrange(out, "(b d) (h w) c -> b d c h w", d=d, h=h, w=w)


def temporal_apply(x: torch.Tensor, layer) -> torch.Tensor:
    """Apply a token-sequence layer per (batch, site) over the D frames."""
    _check_map(x)
    b, d, c, h, w = x.shape
    tokens = rearrange(x, "b d c h w -> (b h w) d c")
    out = layer(tokens)
    return rearrange(out, "(b h w) d c -> b d c h w", h=h, w=w)


def _check_map(x: torch.Tensor) -> None:
    if x.dim() != 5:
        raise ContractError(f"expected [B, D, c, h, w] feature map, got {tuple(x.shape)}")


class ResidualAttention(nn.Module):
    """Pre-norm attention with a residual connection around it.

    Cross-attention variants normalize the context stream separately; passing
    no context gives self-attention. Scores from the latest forward are kept
    on ``last_scores`` when requested.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        d_head: int,
        gen: torch.Generator,
        kv_dim: int | None = None,
        rel_bias: bool = False,
        zero_out: bool = False,
    ):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim) if kv_dim is not None else None
        self.attn = AttentionLayer(
            dim, heads, d_head, gen, kv_dim=kv_dim, rel_bias=rel_bias, zero_out=zero_out
        )
        self.last_scores = None

    def forward(self, tokens, context=None, return_scores=False):
        h = self.norm(tokens)
        if context is None:
            kv = h
        else:
            kv = self.norm_kv(context) if self.norm_kv is not None else context
        out, scores = self.attn(h, kv, return_scores=True)
        self.last_scores = scores if return_scores else None
        return tokens + out


class TokenMLP(nn.Module):
    """Pre-norm two-layer MLP with a residual connection, applied per token."""

    def __init__(self, dim: int, gen: torch.Generator, expand: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = init_linear_(nn.Linear(dim, expand * dim), gen)
        self.fc2 = init_linear_(nn.Linear(expand * dim, dim), gen)

    def forward(self, tokens):
        h = self.fc1(self.norm(tokens))
        return tokens + self.fc2(torch.nn.functional.gelu(h))
