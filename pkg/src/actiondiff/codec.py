"""Exact analytic latent codec: 2x2 space-to-depth plus centering.

Stands in for a pretrained VAE so that codec error never confounds diffusion
measurements. Grayscale frames of even height/width map losslessly to
4-channel latents at half resolution and back.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from einops import rearrange

from .errors import ContractError


@dataclass(frozen=True)
class CodecSpec:
    patch: int = 2
    in_channels: int = 1
    latent_channels: int = 4

    def __post_init__(self):
        if self.latent_channels != self.in_channels * self.patch**2:
            raise ContractError(
                "latent_channels must equal in_channels * patch**2 "
                f"({self.latent_channels} != {self.in_channels} * {self.patch}**2)"
            )


DEFAULT_CODEC = CodecSpec()


def encode(v: torch.Tensor, spec: CodecSpec = DEFAULT_CODEC) -> torch.Tensor:
    """[D, C, H, W] video in [0, 1] -> [D, C*patch^2, H/patch, W/patch] latent.

    Patch pixels become channels in row-major order; values are recentered to
    [-1, 1] via 2x - 1.
    """
    if v.dim() != 4:
        raise ContractError(f"expected [D, C, H, W] video, got shape {tuple(v.shape)}")
    d, c, h, w = v.shape
    p = spec.patch
    if c != spec.in_channels:
        raise ContractError(f"expected {spec.in_channels} channel(s), got {c}")
    if h % p or w % p:
        raise ContractError(f"H and W must be divisible by {p}, got {h}x{w}")
    z = rearrange(v, "d c (h ph) (w pw) -> d (c ph pw) h w", ph=p, pw=p)
    return 2.0 * z - 1.0


def decode(z: torch.Tensor, spec: CodecSpec = DEFAULT_CODEC) -> torch.Tensor:
    """Inverse of :func:`encode`; output clamped to [0, 1]."""
    if z.dim() != 4:
        raise ContractError(f"expected [D, C, h, w] latent, got shape {tuple(z.shape)}")
    if z.shape[1] != spec.latent_channels:
        raise ContractError(
            f"expected {spec.latent_channels} latent channels, got {z.shape[1]}"
        )
    p = spec.patch
    v = rearrange(
        z, "d (c ph pw) h w -> d c (h ph) (w pw)", c=spec.in_channels, ph=p, pw=p
    )
    return ((v + 1.0) / 2.0).clamp(0.0, 1.0)


def latent_shape(frames: int, height: int, width: int, spec: CodecSpec = DEFAULT_CODEC):
    return (frames, spec.latent_channels, height // spec.patch, width // spec.patch)
