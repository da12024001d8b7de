import numpy as np
import pytest
import torch

from actiondiff.backbone import BackboneConfig, VideoDiffusionModel
from actiondiff.prism import PrismConfig
from actiondiff.synthdata import corpus_vocabulary

torch.set_num_threads(1)


TINY_BACKBONE = dict(
    frames=4, latent_size=4, channels=(8, 16), heads=2, text_dim=8, time_dim=16
)
TINY_PRISM = dict(
    layers=2, model_dim=16, heads=2, d_head=8, text_dim_in=8, text_dim_proj=12,
    out_channels=4,
)


@pytest.fixture(scope="session")
def vocab():
    return corpus_vocabulary()


@pytest.fixture()
def tiny_base(vocab):
    return VideoDiffusionModel(BackboneConfig(**TINY_BACKBONE), vocab, None, seed=0)


@pytest.fixture()
def tiny_aicl(vocab):
    cfg = BackboneConfig(**TINY_BACKBONE, injection=("temporal",))
    return VideoDiffusionModel(cfg, vocab, PrismConfig(**TINY_PRISM), seed=0)


def finite_diff_grads(params, loss_fn, h=1e-5):
    """Central finite differences of a scalar loss w.r.t. each parameter."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gf = p.reshape(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                lp = float(loss_fn())
                flat[i] = orig - h
                lm = float(loss_fn())
                flat[i] = orig
                gf[i] = (lp - lm) / (2.0 * h)
            grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst elementwise relative disagreement between two gradient lists."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(a.abs().numpy(), n.abs().numpy()), floor)
        worst = max(worst, float((a - n).abs().numpy().__truediv__(denom).max()))
    return worst


def rand_like_double(shape, seed, scale=1.0):
    gen = torch.Generator().manual_seed(seed)
    return torch.empty(shape, dtype=torch.float64).normal_(0.0, scale, generator=gen)
