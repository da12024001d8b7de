"""Desk-scale latent video diffusion with in-context action conditioning.

A small frozen text-to-video diffusion backbone is steered toward actions it
was never trained on by injecting motion features, distilled from reference
videos, through added temporal cross-attention layers.
"""

__version__ = "0.1.0"

AIVF_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
