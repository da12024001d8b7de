"""Inference: distill references once, run the reverse chain, decode.

Action features are computed in a single prism pass per reference before the
diffusion loop starts and reused at every timestep, so conditioning cost does
not scale with step count. The report records call counts, stage wall times,
and a trace hash over every intermediate latent, making determinism and
feature reuse checkable from the outside.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .backbone import VideoDiffusionModel, attention_scores
from .codec import decode, encode, latent_shape
from .errors import CheckpointError, ConfigurationError, ContractError
from .prism import ActionFeature, combine_references
from .schedule import NoiseSchedule, reverse_step, sampling_timesteps
from .synthdata import read_aivf, write_aivf


@dataclass
class GenerationReport:
    caption: str
    k: int
    steps: int
    sampler: str
    eta: float
    seed: int
    prism_calls: int
    feature_reused: bool
    trace_hash: str
    stage_seconds: dict = field(default_factory=dict)

    @property
    def conditioning_overhead(self) -> float:
        """Share of wall time spent preparing reference conditioning."""
        total = sum(self.stage_seconds.values())
        return self.stage_seconds.get("conditioning", 0.0) / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "caption": self.caption,
            "k": self.k,
            "steps": self.steps,
            "sampler": self.sampler,
            "eta": self.eta,
            "seed": self.seed,
            "prism_calls": self.prism_calls,
            "feature_reused": self.feature_reused,
            "trace_hash": self.trace_hash,
            "stage_seconds": dict(self.stage_seconds),
            "conditioning_overhead": self.conditioning_overhead,
        }


def _load_ref_video(path, root) -> torch.Tensor:
    p = Path(path)
    if not p.is_absolute() and root is not None:
        p = Path(root) / p
    return read_aivf(p)


@torch.no_grad()
def generate(
    caption: str,
    refs: list[tuple[str, str]],
    model: VideoDiffusionModel,
    sched: NoiseSchedule,
    steps: int = 50,
    sampler: str = "ddim",
    eta: float = 0.0,
    seed: int = 0,
    ref_root=None,
    dump_attn_dir=None,
) -> tuple[torch.Tensor, GenerationReport]:
    """Generate one video for a caption, optionally steered by references.

    ``refs`` holds (caption, video path) pairs; an empty list falls back to
    unconditioned generation. Output bytes are fully determined by
    (seed, steps, sampler, eta, refs, checkpoint).
    """
    if not caption:
        raise ContractError("empty caption")
    if refs and model.prism is None:
        raise ConfigurationError("references supplied but the model has no prism")

    t0 = time.perf_counter()
    prism_calls = 0
    feats = None
    if refs:
        per_axis = {}
        for axis in model.cfg.injection:
            features = []
            for i, (ref_caption, ref_path) in enumerate(refs):
                z_ref = encode(_load_ref_video(ref_path, ref_root))
                c_ref = model.text(ref_caption)
                features.append(model.prism(z_ref, c_ref, ref_id=str(ref_path)))
                prism_calls += 1
            per_axis[axis] = combine_references(features)
        feats = {axis: f.tokens[None] for axis, f in per_axis.items()}
    t_cond = time.perf_counter() - t0

    c_ori = model.text(caption)[None]
    shape = latent_shape(model.cfg.frames, model.cfg.latent_size * 2,
                         model.cfg.latent_size * 2)
    gen = torch.Generator().manual_seed(seed)
    z = torch.empty((1,) + shape).normal_(generator=gen)

    hasher = hashlib.sha256()
    feat_ids = set()
    ts = sampling_timesteps(sched.T, steps)
    t0 = time.perf_counter()
    for i, t in enumerate(ts):
        last = i == len(ts) - 1
        eps_hat = model(z, c_ori, torch.tensor([t]), feats,
                        return_scores=last and dump_attn_dir is not None)
        t_prev = ts[i + 1] if not last else 0
        z = reverse_step(z[0], eps_hat[0], t, sched, sampler, eta, gen, t_prev)[None]
        hasher.update(z.numpy().astype("<f4").tobytes())
        if feats is not None:
            feat_ids.add(tuple(id(v) for v in feats.values()))
    t_diff = time.perf_counter() - t0

    t0 = time.perf_counter()
    video = decode(z[0])
    t_dec = time.perf_counter() - t0

    if dump_attn_dir is not None:
        dump_attention_grids(model, Path(dump_attn_dir))

    report = GenerationReport(
        caption=caption,
        k=len(refs),
        steps=len(ts),
        sampler=sampler,
        eta=eta,
        seed=seed,
        prism_calls=prism_calls,
        feature_reused=(feats is None) or len(feat_ids) == 1,
        trace_hash=hasher.hexdigest(),
        stage_seconds={
            "conditioning": t_cond,
            "diffusion": t_diff,
            "decode": t_dec,
        },
    )
    return video, report


def dump_attention_grids(model, out_dir: Path) -> None:
    """Write the last forward pass's cross-attention scores as single-frame
    AIVF grids, one file per layer, averaged over heads and folded batch."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, scores in attention_scores(model).items():
        grid = scores.mean(dim=(0, 1)) if scores.dim() == 4 else scores.mean(dim=0)
        write_aivf(out_dir / f"{name}.aivf", grid[None, None])


def load_for_generation(ckpt_dir, seed: int = 0):
    """Rebuild (model, schedule) from a checkpoint directory."""
    from .trainer import load_checkpoint, model_from_checkpoint, schedule_from_checkpoint

    ckpt = load_checkpoint(ckpt_dir)
    model = model_from_checkpoint(ckpt, seed=seed)
    model.eval()
    return model, schedule_from_checkpoint(ckpt)
