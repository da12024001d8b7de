"""Noise-prediction network: a small U-Net of factorized attention blocks.

Every block runs spatial and temporal self-attention, text cross-attention on
both axes, and an MLP; blocks that carry action conditioning append adapter
cross-attention layers whose output projections start at zero, so a freshly
wrapped model is extensionally identical to its base. Base layers freeze for
the adapter training phase; only adapters and the prism stay trainable.

The two resolution levels are connected by exact space-to-depth resampling,
keeping the whole network linear-plus-attention.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn

from .attention import ResidualAttention, TokenMLP, init_linear_, spatial_apply, temporal_apply
from .conditioning import TextEmbedder, Vocabulary
from .errors import ConfigurationError, ContractError
from .prism import ActionFeature, ActionPrism, PrismConfig

INJECTION_AXES = ("spatial", "temporal")


@dataclass(frozen=True)
class BackboneConfig:
    frames: int = 8
    latent_size: int = 8
    latent_channels: int = 4
    channels: tuple[int, int] = (32, 64)
    heads: int = 4
    text_dim: int = 32
    time_dim: int = 64
    pos_embed: bool = True            # learned absolute position per level
    injection: tuple[str, ...] = ()   # () = plain base model
    feature_channels: int = 4         # width of injected action tokens

    def __post_init__(self):
        if len(self.channels) != 2:
            raise ConfigurationError("exactly two resolution levels are supported")
        for c in self.channels:
            if c % self.heads:
                raise ConfigurationError(f"channels {c} not divisible by {self.heads} heads")
        for axis in self.injection:
            if axis not in INJECTION_AXES:
                raise ConfigurationError(f"unknown injection axis {axis!r}")
        if self.latent_size % 2:
            raise ConfigurationError("latent_size must be even for the down/up resampling")

    @property
    def conditioned(self) -> bool:
        return bool(self.injection)

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "latent_size": self.latent_size,
            "latent_channels": self.latent_channels,
            "channels": list(self.channels),
            "heads": self.heads,
            "text_dim": self.text_dim,
            "time_dim": self.time_dim,
            "pos_embed": self.pos_embed,
            "injection": list(self.injection),
            "feature_channels": self.feature_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["injection"] = tuple(d.get("injection", ()))
        return BackboneConfig(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, [B] -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class BackboneBlock(nn.Module):
    """One U-Net stage: self-attention, text cross-attention, MLP, adapters.

    Stage order is SA_S, SA_T, CA_S, CA_T, MLP, then the adapter layers at
    the end of the block. Text tokens serve as keys on both axes; each frame
    (or site) attends over the same token set.
    """

    def __init__(self, dim: int, cfg: BackboneConfig, gen: torch.Generator):
        super().__init__()
        heads = cfg.heads
        d_head = dim // heads
        self.time_proj = init_linear_(nn.Linear(cfg.time_dim, dim), gen)
        self.sa_s = ResidualAttention(dim, heads, d_head, gen, rel_bias=True)
        self.sa_t = ResidualAttention(dim, heads, d_head, gen, rel_bias=True)
        self.ca_s = ResidualAttention(dim, heads, d_head, gen, kv_dim=cfg.text_dim)
        self.ca_t = ResidualAttention(dim, heads, d_head, gen, kv_dim=cfg.text_dim)
        self.mlp = TokenMLP(dim, gen)
        for axis in cfg.injection:
            setattr(
                self,
                f"adapter_{axis[0]}",
                ResidualAttention(
                    dim, heads, d_head, gen,
                    kv_dim=cfg.feature_channels, rel_bias=True, zero_out=True,
                ),
            )
        self.injection = cfg.injection

    def forward(self, x, text, temb, feats=None, return_scores=False):
        """x: [B, D, c, h, w]; text: [B, n, text_dim]; temb: [B, time_dim];
        feats: None or {axis: [B, N, feature_channels]}."""
        b, d, _, h, w = x.shape
        x = x + self.time_proj(temb)[:, None, :, None, None]
        x = spatial_apply(x, self.sa_s)
        x = temporal_apply(x, self.sa_t)
        text_per_frame = text.repeat_interleave(d, dim=0)
        text_per_site = text.repeat_interleave(h * w, dim=0)
        x = spatial_apply(
            x, lambda tok: self.ca_s(tok, text_per_frame, return_scores=return_scores)
        )
        x = temporal_apply(
            x, lambda tok: self.ca_t(tok, text_per_site, return_scores=return_scores)
        )
        tokens = rearrange(x, "b d c h w -> b (d h w) c")
        x = rearrange(self.mlp(tokens), "b (d h w) c -> b d c h w", d=d, h=h, w=w)
        if feats is not None:
            if not self.injection:
                raise ConfigurationError(
                    "action features supplied but this block has no adapter layers"
                )
            for axis in self.injection:
                layer = getattr(self, f"adapter_{axis[0]}")
                r = feats[axis]
                if axis == "temporal":
                    ctx = r.repeat_interleave(h * w, dim=0)
                    x = temporal_apply(
                        x, lambda tok: layer(tok, ctx, return_scores=return_scores)
                    )
                else:
                    ctx = r.repeat_interleave(d, dim=0)
                    x = spatial_apply(
                        x, lambda tok: layer(tok, ctx, return_scores=return_scores)
                    )
        return x


class DiffusionBackbone(nn.Module):
    """Two-level U-Net over [B, D, 4, h, w] latents."""

    def __init__(self, cfg: BackboneConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        c0, c1 = cfg.channels
        self.time_mlp = nn.Sequential(
            init_linear_(nn.Linear(cfg.time_dim, cfg.time_dim), gen),
            nn.GELU(),
            init_linear_(nn.Linear(cfg.time_dim, cfg.time_dim), gen),
        )
        self.in_proj = init_linear_(nn.Linear(cfg.latent_channels, c0), gen)
        self.enc = BackboneBlock(c0, cfg, gen)
        self.down = init_linear_(nn.Linear(4 * c0, c1), gen)
        self.mid = BackboneBlock(c1, cfg, gen)
        self.up = init_linear_(nn.Linear(c1, 4 * c0), gen)
        self.merge = init_linear_(nn.Linear(2 * c0, c0), gen)
        self.dec = BackboneBlock(c0, cfg, gen)
        self.out_norm = nn.LayerNorm(c0)
        self.out_proj = init_linear_(nn.Linear(c0, cfg.latent_channels), gen)
        if cfg.pos_embed:
            d, s = cfg.frames, cfg.latent_size
            for name, c, hw in (("enc", c0, s), ("mid", c1, s // 2), ("dec", c0, s)):
                pos = torch.empty(d, c, hw, hw).normal_(0.0, 0.02, generator=gen)
                setattr(self, f"pos_{name}", nn.Parameter(pos))

    @property
    def blocks(self):
        return {"enc": self.enc, "mid": self.mid, "dec": self.dec}

    def forward(self, z, text, t, feats=None, return_scores=False):
        """Predict noise for [B, D, 4, h, w] latents at integer timesteps [B]."""
        if z.dim() != 5 or z.shape[2] != self.cfg.latent_channels:
            raise ContractError(f"bad latent layout {tuple(z.shape)}")
        dtype = z.dtype
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(dtype))
        x = _pointwise5(z, self.in_proj)
        e = self.enc(x, text, temb, feats, return_scores)
        m = rearrange(e, "b d c (h p) (w q) -> b d (c p q) h w", p=2, q=2)
        m = _pointwise5(m, self.down)
        m = self.mid(m, text, temb, feats, return_scores)
        u = _pointwise5(m, self.up)
        u = rearrange(u, "b d (c p q) h w -> b d c (h p) (w q)", p=2, q=2)
        u = _pointwise5(torch.cat([u, e], dim=2), self.merge)
        u = self.dec(u, text, temb, feats, return_scores)
        return _pointwise5(u, nn.Sequential(self.out_norm, self.out_proj))


def _pointwise5(x, net):
    b, d, c, h, w = x.shape
    out = net(rearrange(x, "b d c h w -> (b d h w) c"))
    return rearrange(out, "(b d h w) c -> b d c h w", b=b, d=d, h=h, w=w)


class VideoDiffusionModel(nn.Module):
    """Text embedder + diffusion backbone, plus the prism when conditioned.

    The adapter training phase freezes everything except, exactly, the
    adapter layers and the prism.
    """

    def __init__(
        self,
        cfg: BackboneConfig,
        vocab: Vocabulary,
        prism_cfg: PrismConfig | None = None,
        seed: int = 0,
    ):
        super().__init__()
        if cfg.conditioned and prism_cfg is None:
            raise ConfigurationError("conditioned backbone requires a prism config")
        if not cfg.conditioned and prism_cfg is not None:
            raise ConfigurationError("prism config given but injection is disabled")
        gen = torch.Generator().manual_seed(seed)
        self.cfg = cfg
        self.prism_cfg = prism_cfg
        self.text = TextEmbedder(vocab, cfg.text_dim, gen)
        self.backbone = DiffusionBackbone(cfg, gen)
        self.prism = (
            ActionPrism(prism_cfg, gen, in_channels=cfg.latent_channels)
            if prism_cfg is not None
            else None
        )

    # -- noise prediction ---------------------------------------------------

    def forward(self, z, text_emb, t, feats=None, return_scores=False):
        """Batched prediction; feats is None, a [B, N, c_R] tensor applied to
        every injection axis, or an {axis: tensor} dict."""
        if feats is not None:
            if not self.cfg.conditioned:
                raise ConfigurationError(
                    "action features supplied but injection is disabled"
                )
            if isinstance(feats, torch.Tensor):
                feats = {axis: feats for axis in self.cfg.injection}
        return self.backbone(z, text_emb, t, feats, return_scores)

    def predict_noise(
        self,
        z_t: torch.Tensor,
        c_ori: torch.Tensor,
        t: int,
        r: ActionFeature | None = None,
        return_scores: bool = False,
    ) -> torch.Tensor:
        """Single-sample noise prediction: [D, 4, h, w] in, same layout out."""
        if z_t.dim() != 4:
            raise ContractError(f"expected [D, 4, h, w] latent, got {tuple(z_t.shape)}")
        if isinstance(r, ActionFeature):
            feats = r.tokens[None].to(z_t.dtype)
        elif isinstance(r, dict):
            feats = {a: f.tokens[None].to(z_t.dtype) for a, f in r.items()}
        else:
            feats = None
        out = self.forward(
            z_t[None],
            c_ori[None],
            torch.tensor([t], dtype=torch.long),
            feats,
            return_scores,
        )
        return out[0]

    # -- parameter bookkeeping ----------------------------------------------

    def parameter_namespace(self, name: str) -> str:
        return name.split(".", 1)[0]

    def trainable_parameter_names(self) -> list[str]:
        """Adapter + prism parameters when conditioned, everything otherwise."""
        if not self.cfg.conditioned:
            return [n for n, _ in self.named_parameters()]
        keep = []
        for n, _ in self.named_parameters():
            if n.startswith("prism.") or ".adapter_" in n:
                keep.append(n)
        return keep

    def frozen_parameter_names(self) -> list[str]:
        trainable = set(self.trainable_parameter_names())
        return [n for n, _ in self.named_parameters() if n not in trainable]


def trainable_parameters(model: VideoDiffusionModel) -> dict[str, nn.Parameter]:
    """Named parameters the current mode is allowed to update."""
    names = set(model.trainable_parameter_names())
    return {n: p for n, p in model.named_parameters() if n in names}


def attention_scores(model: nn.Module) -> dict[str, torch.Tensor]:
    """Collect row-stochastic score matrices recorded by cross-attention
    layers on the most recent forward pass run with return_scores."""
    out = {}
    for name, module in model.named_modules():
        if isinstance(module, ResidualAttention) and module.norm_kv is not None:
            if module.last_scores is not None:
                out[name] = module.last_scores
    return out


def wiring_hash(model: VideoDiffusionModel) -> str:
    """Digest of the parameter map and config; equal wiring, equal hash."""
    spec = {
        "params": sorted(
            (n, list(p.shape)) for n, p in model.named_parameters()
        ),
        "backbone": model.cfg.to_dict(),
        "prism": model.prism_cfg.to_dict() if model.prism_cfg else None,
    }
    blob = json.dumps(spec, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
