"""Reference-video motion encoder: a factorized-attention transformer stack.

Each block runs spatial then temporal self-attention, mixes in the reference
caption through cross-attention, and finishes with an MLP. A three-stage
output head widens by 4x and reduces to the token width, and spatial mean
pooling leaves one token per reference frame. Tokens from several references
concatenate into a single variable-length feature.

Variant flags cover the runtime-selectable wirings: dropping self-attention,
swapping which stream provides queries in the cross-attention, and choosing
the spatial/temporal axes the caption enters through.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn

from .attention import (
    AttentionLayer,
    ResidualAttention,
    TokenMLP,
    init_linear_,
    spatial_apply,
    temporal_apply,
)
from .errors import ConfigurationError, ContractError

CROSS_ROLES = ("video_query", "text_query")
CROSS_AXES = ("spatial", "temporal")


@dataclass(frozen=True)
class PrismConfig:
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    d_head: int = 16
    text_dim_in: int = 32
    text_dim_proj: int = 48
    out_channels: int = 4
    use_self_attn: bool = True
    cross_qk_role: str = "video_query"
    cross_axes: tuple[str, ...] = ("spatial",)
    pool_tokens: bool = True  # False keeps one token per latent site

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigurationError(f"layers must be >= 1, got {self.layers}")
        if self.cross_qk_role not in CROSS_ROLES:
            raise ConfigurationError(f"cross_qk_role must be one of {CROSS_ROLES}")
        if not self.cross_axes:
            raise ConfigurationError("cross_axes must be nonempty")
        for axis in self.cross_axes:
            if axis not in CROSS_AXES:
                raise ConfigurationError(f"unknown cross axis {axis!r}")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "model_dim": self.model_dim,
            "heads": self.heads,
            "d_head": self.d_head,
            "text_dim_in": self.text_dim_in,
            "text_dim_proj": self.text_dim_proj,
            "out_channels": self.out_channels,
            "use_self_attn": self.use_self_attn,
            "cross_qk_role": self.cross_qk_role,
            "cross_axes": list(self.cross_axes),
            "pool_tokens": self.pool_tokens,
        }

    @staticmethod
    def from_dict(d: dict) -> "PrismConfig":
        d = dict(d)
        d["cross_axes"] = tuple(d.get("cross_axes", ("spatial",)))
        return PrismConfig(**d)


@dataclass(frozen=True)
class ActionFeature:
    """Token sequence [N, width] distilled from one or more references."""

    tokens: torch.Tensor
    provenance: tuple = ()

    def __post_init__(self):
        if self.tokens.dim() != 2 or self.tokens.shape[0] < 1:
            raise ContractError(
                f"action feature needs [N >= 1, width] tokens, got {tuple(self.tokens.shape)}"
            )
        if not torch.isfinite(self.tokens).all():
            raise ContractError("action feature contains non-finite values")

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def combine_references(features: list[ActionFeature]) -> ActionFeature:
    """Concatenate features token-wise, in order, re-basing provenance spans."""
    if not features:
        raise ContractError("no action features to combine")
    width = features[0].width
    for f in features:
        if f.width != width:
            raise ContractError(f"token width mismatch: {f.width} != {width}")
    tokens = torch.cat([f.tokens for f in features], dim=0)
    provenance = []
    base = 0
    for f in features:
        for ref_id, (start, stop) in f.provenance:
            provenance.append((ref_id, (base + start, base + stop)))
        base += f.tokens.shape[0]
    return ActionFeature(tokens=tokens, provenance=tuple(provenance))


def _pointwise(x: torch.Tensor, net: nn.Module) -> torch.Tensor:
    """Apply a channel-dim network at every (frame, site) of [B, D, c, h, w]."""
    b, d, c, h, w = x.shape
    out = net(rearrange(x, "b d c h w -> (b d h w) c"))
    return rearrange(out, "(b d h w) c -> b d c h w", b=b, d=d, h=h, w=w)


class PrismBlock(nn.Module):
    def __init__(self, cfg: PrismConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        dim, heads, d_head = cfg.model_dim, cfg.heads, cfg.d_head
        if cfg.use_self_attn:
            self.sa_s = ResidualAttention(dim, heads, d_head, gen, rel_bias=True)
            self.sa_t = ResidualAttention(dim, heads, d_head, gen, rel_bias=True)
        if cfg.cross_qk_role == "video_query":
            for axis in cfg.cross_axes:
                setattr(
                    self,
                    f"ca_{axis[0]}",
                    ResidualAttention(
                        dim, heads, d_head, gen, kv_dim=cfg.text_dim_proj, rel_bias=True
                    ),
                )
        else:
            # text queries attend over video tokens; pooled result re-enters
            # the video stream as a broadcast residual update
            for axis in cfg.cross_axes:
                setattr(
                    self,
                    f"ca_{axis[0]}",
                    AttentionLayer(
                        cfg.text_dim_proj, heads, d_head, gen,
                        d_out=dim, kv_dim=dim, rel_bias=True,
                    ),
                )
            self.norm_q = nn.LayerNorm(cfg.text_dim_proj)
            self.norm_kv = nn.LayerNorm(dim)
        self.mlp = TokenMLP(dim, gen)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, return_scores: bool = False):
        """x: [B, D, c, h, w]; ctx: [B, n_text, text_dim_proj]."""
        b, d, _, h, w = x.shape
        cfg = self.cfg
        if cfg.use_self_attn:
            x = spatial_apply(x, self.sa_s)
            x = temporal_apply(x, self.sa_t)
        for axis in cfg.cross_axes:
            layer = getattr(self, f"ca_{axis[0]}")
            if axis == "spatial":
                folded = ctx.repeat_interleave(d, dim=0)
                if cfg.cross_qk_role == "video_query":
                    x = spatial_apply(
                        x, lambda t: layer(t, folded, return_scores=return_scores)
                    )
                else:
                    kv = rearrange(x, "b d c h w -> (b d) (h w) c")
                    u = layer(self.norm_q(folded), self.norm_kv(kv))
                    u = rearrange(u.mean(dim=1), "(b d) c -> b d c", d=d)
                    x = x + u[..., None, None]
            else:
                folded = ctx.repeat_interleave(h * w, dim=0)
                if cfg.cross_qk_role == "video_query":
                    x = temporal_apply(
                        x, lambda t: layer(t, folded, return_scores=return_scores)
                    )
                else:
                    kv = rearrange(x, "b d c h w -> (b h w) d c")
                    u = layer(self.norm_q(folded), self.norm_kv(kv))
                    u = rearrange(u.mean(dim=1), "(b h w) c -> b c h w", h=h, w=w)
                    x = x + u[:, None]
        tokens = rearrange(x, "b d c h w -> b (d h w) c")
        tokens = self.mlp(tokens)
        return rearrange(tokens, "b (d h w) c -> b d c h w", d=d, h=h, w=w)


class ActionPrism(nn.Module):
    """Distills per-frame action tokens from a reference latent and caption."""

    def __init__(self, cfg: PrismConfig, gen: torch.Generator, in_channels: int = 4):
        super().__init__()
        self.cfg = cfg
        dim = cfg.model_dim
        self.video_in = nn.Sequential(
            init_linear_(nn.Linear(in_channels, dim), gen),
            nn.GELU(),
            init_linear_(nn.Linear(dim, dim), gen),
        )
        self.text_in = nn.Sequential(
            init_linear_(nn.Linear(cfg.text_dim_in, cfg.text_dim_proj), gen),
            nn.GELU(),
            init_linear_(nn.Linear(cfg.text_dim_proj, cfg.text_dim_proj), gen),
        )
        self.blocks = nn.ModuleList(PrismBlock(cfg, gen) for _ in range(cfg.layers))
        self.out_norm = nn.LayerNorm(dim)
        self.out_head = nn.Sequential(
            init_linear_(nn.Linear(dim, 4 * dim), gen),
            nn.GELU(),
            init_linear_(nn.Linear(4 * dim, 4 * dim), gen),
            nn.GELU(),
            init_linear_(nn.Linear(4 * dim, cfg.out_channels), gen),
        )

    def forward_tokens(
        self, z: torch.Tensor, ctx: torch.Tensor, return_scores: bool = False
    ) -> torch.Tensor:
        """Batched core: [B, D, 4, h, w] + [B, n, text_dim_in] -> [B, N, out]."""
        if z.dim() != 5:
            raise ContractError(f"expected [B, D, 4, h, w] latents, got {tuple(z.shape)}")
        if ctx.dim() != 3 or ctx.shape[1] < 1:
            raise ContractError("reference caption embeddings are empty")
        x = _pointwise(z, self.video_in)
        ctx = self.text_in(ctx)
        for block in self.blocks:
            x = block(x, ctx, return_scores=return_scores)
        x = _pointwise(x, nn.Sequential(self.out_norm, self.out_head))
        if self.cfg.pool_tokens:
            return x.mean(dim=(3, 4))  # [B, D, out_channels]
        return rearrange(x, "b d c h w -> b (d h w) c")

    def forward(
        self,
        z_ref: torch.Tensor,
        c_ref: torch.Tensor,
        ref_id: str = "ref",
        return_scores: bool = False,
    ) -> ActionFeature:
        """[D, 4, h, w] reference latent + [n, text_dim_in] caption -> feature.

        Independent of any diffusion timestep by construction; one token per
        reference frame under the default pooling.
        """
        if z_ref.dim() != 4:
            raise ContractError(f"expected [D, 4, h, w] latent, got {tuple(z_ref.shape)}")
        if c_ref.dim() != 2 or c_ref.shape[0] < 1:
            raise ContractError("reference caption embedding is empty")
        tokens = self.forward_tokens(z_ref[None], c_ref[None], return_scores)[0]
        return ActionFeature(
            tokens=tokens, provenance=((ref_id, (0, tokens.shape[0])),)
        )
