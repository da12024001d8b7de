"""Two-phase training and the checkpoint container.

Phase ``base`` pretrains the whole backbone and text table on training-split
actions. Phase ``aicl`` wraps a base checkpoint, freezes every base
parameter, and trains only the prism and the adapter layers, with exactly one
same-verb reference video per sample.

A checkpoint is a directory of ``manifest.json`` (parameter table, configs,
schedule, vocabulary) plus ``params.bin`` (little-endian f32 blobs,
concatenated in manifest order). Loading then saving is byte idempotent.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import CHECKPOINT_FORMAT_VERSION
from .backbone import BackboneConfig, VideoDiffusionModel, trainable_parameters
from .codec import encode
from .conditioning import CorpusManifest, Vocabulary, VerbList, select_references
from .errors import CheckpointError, ConfigurationError, NumericError
from .prism import PrismConfig
from .schedule import NoiseSchedule, forward_diffuse, make_schedule
from .synthdata import load_video

PHASES = ("base", "aicl")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "base"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.9)
    weight_decay: float = 0.03
    batch_size: int = 8
    steps: int = 5000
    seed: int = 0
    lambda_vlb: float = 0.0
    checkpoint_every: int = 0  # 0 = final only

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigurationError(f"phase must be one of {PHASES}")
        if self.lambda_vlb != 0.0:
            raise ConfigurationError("variational-bound loss is disabled; lambda_vlb must be 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")

    @property
    def total_pairs(self) -> int:
        return self.steps * self.batch_size

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "lr": self.lr,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "seed": self.seed,
            "lambda_vlb": self.lambda_vlb,
            "checkpoint_every": self.checkpoint_every,
            "total_pairs": self.total_pairs,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d.pop("total_pairs", None)
        d["betas"] = tuple(d.get("betas", (0.9, 0.9)))
        return TrainConfig(**d)


def make_optimizer(model: VideoDiffusionModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """Adam with decoupled weight decay over the phase's trainable set."""
    params = list(trainable_parameters(model).values())
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay, eps=1e-8
    )


def freeze_for_phase(model: VideoDiffusionModel) -> None:
    """Clear requires_grad on frozen parameters so no gradient ever reaches them."""
    trainable = set(model.trainable_parameter_names())
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)


# --- checkpoint container --------------------------------------------------

@dataclass
class Checkpoint:
    params: dict                    # name -> float32 tensor
    frozen: dict                    # name -> bool
    model_config: dict              # {"backbone": ..., "prism": ... or None}
    schedule_meta: dict
    train_config: dict
    vocabulary: tuple[str, ...]
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def namespace(self, name: str) -> str:
        return name.split(".", 1)[0]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.params):
        tensor = ckpt.params[name].detach().cpu().contiguous()
        blob = tensor.numpy().astype("<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "frozen": bool(ckpt.frozen[name]),
                "namespace": ckpt.namespace(name),
                "offset": offset,
                "numel": tensor.numel(),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": ckpt.format_version,
        "model": ckpt.model_config,
        "schedule": ckpt.schedule_meta,
        "train_config": ckpt.train_config,
        "vocabulary": list(ckpt.vocabulary),
        "params": entries,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    (out / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    mpath, bpath = root / "manifest.json", root / "params.bin"
    if not mpath.exists() or not bpath.exists():
        raise CheckpointError(f"no checkpoint at {root}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')}"
        )
    raw = bpath.read_bytes()
    params, frozen = {}, {}
    for e in manifest["params"]:
        n = e["numel"]
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=e["offset"])
        if arr.size != n:
            raise CheckpointError(f"params.bin truncated at {e['name']}")
        params[e["name"]] = torch.from_numpy(arr.copy()).reshape(e["shape"])
        frozen[e["name"]] = bool(e["frozen"])
    return Checkpoint(
        params=params,
        frozen=frozen,
        model_config=manifest["model"],
        schedule_meta=manifest["schedule"],
        train_config=manifest["train_config"],
        vocabulary=tuple(manifest["vocabulary"]),
    )


def checkpoint_from_model(
    model: VideoDiffusionModel,
    sched: NoiseSchedule,
    train_cfg: TrainConfig,
) -> Checkpoint:
    trainable = set(model.trainable_parameter_names())
    params = {n: p.detach().clone() for n, p in model.named_parameters()}
    frozen = {n: (n not in trainable) for n in params}
    return Checkpoint(
        params=params,
        frozen=frozen,
        model_config={
            "backbone": model.cfg.to_dict(),
            "prism": model.prism_cfg.to_dict() if model.prism_cfg else None,
        },
        schedule_meta=sched.metadata(),
        train_config=train_cfg.to_dict(),
        vocabulary=model.text.vocab.tokens,
    )


def model_from_checkpoint(ckpt: Checkpoint, seed: int = 0) -> VideoDiffusionModel:
    vocab = Vocabulary(tokens=tuple(ckpt.vocabulary))
    bcfg = BackboneConfig.from_dict(ckpt.model_config["backbone"])
    pcfg = (
        PrismConfig.from_dict(ckpt.model_config["prism"])
        if ckpt.model_config.get("prism")
        else None
    )
    model = VideoDiffusionModel(bcfg, vocab, pcfg, seed=seed)
    _load_into(model, ckpt.params, strict=True)
    return model


def schedule_from_checkpoint(ckpt: Checkpoint) -> NoiseSchedule:
    m = ckpt.schedule_meta
    return make_schedule(m["T"], m["beta_start"], m["beta_end"], m["kind"])


def _load_into(model, params: dict, strict: bool) -> None:
    own = dict(model.named_parameters())
    missing = set(params) - set(own)
    if missing:
        raise CheckpointError(f"checkpoint has unknown parameters: {sorted(missing)[:4]}")
    if strict and set(own) - set(params):
        raise CheckpointError(
            f"checkpoint is missing parameters: {sorted(set(own) - set(params))[:4]}"
        )
    with torch.no_grad():
        for name, value in params.items():
            if own[name].shape != value.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            own[name].copy_(value)


# --- training loop ---------------------------------------------------------

@dataclass
class TrainSample:
    caption: str
    video: torch.Tensor
    ref_caption: str | None = None
    ref_video: torch.Tensor | None = None


def _pad_captions(model: VideoDiffusionModel, captions: list[str]) -> torch.Tensor:
    vocab = model.text.vocab
    ids = [vocab.encode(c) for c in captions]
    width = max(len(i) for i in ids)
    padded = torch.full((len(ids), width), vocab.pad_id, dtype=torch.long)
    for row, seq in enumerate(ids):
        padded[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
    return model.text.embed_ids(padded)


def _batched_features(model: VideoDiffusionModel, batch: list[TrainSample]) -> torch.Tensor:
    """Distill every sample's reference in prism passes grouped by caption
    length, so no padding enters the prism."""
    vocab = model.text.vocab
    groups = {}
    for i, s in enumerate(batch):
        groups.setdefault(len(vocab.encode(s.ref_caption)), []).append(i)
    out = [None] * len(batch)
    for _, idxs in sorted(groups.items()):
        z = torch.stack([encode(batch[i].ref_video) for i in idxs])
        ctx = torch.stack([model.text(batch[i].ref_caption) for i in idxs])
        tokens = model.prism.forward_tokens(z, ctx)
        for row, i in enumerate(idxs):
            out[i] = tokens[row]
    return torch.stack(out)


def training_step(
    model: VideoDiffusionModel,
    sched: NoiseSchedule,
    batch: list[TrainSample],
    opt: torch.optim.Optimizer,
    phase: str,
    rng: torch.Generator,
    check_frozen: bool = False,
) -> float:
    """One optimization step of the noise-prediction objective.

    Per sample: encode the reference and distill its action feature (adapter
    phase only), draw t uniform in 1..T and unit Gaussian noise, noise the
    clean latent, and regress the model output onto the injected noise with a
    mean squared error. Only the phase's trainable parameters move.
    """
    if phase == "aicl":
        if any(s.ref_video is None for s in batch):
            raise ConfigurationError("adapter phase batch requires references")
    elif any(s.ref_video is not None for s in batch):
        raise ConfigurationError("base phase batch must not carry references")

    frozen_before = None
    if check_frozen:
        frozen_before = {
            n: p.detach().clone()
            for n, p in model.named_parameters()
            if n in set(model.frozen_parameter_names())
        }

    z0 = torch.stack([encode(s.video) for s in batch])
    feats = None
    if phase == "aicl":
        feats = _batched_features(model, batch)

    b = len(batch)
    t = torch.randint(1, sched.T + 1, (b,), generator=rng)
    eps = torch.empty_like(z0).normal_(generator=rng)
    z_t = forward_diffuse(z0, t, eps, sched)
    text_emb = _pad_captions(model, [s.caption for s in batch])

    eps_hat = model(z_t, text_emb, t, feats)
    loss = ((eps_hat - eps) ** 2).mean()

    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()

    if check_frozen:
        for n, before in frozen_before.items():
            after = dict(model.named_parameters())[n]
            if not torch.equal(before, after):
                raise RuntimeError(f"frozen parameter {n} was mutated")
    return float(loss.detach())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)


def run_training(
    cfg: TrainConfig,
    corpus_root,
    manifest: CorpusManifest,
    verbs: VerbList | None = None,
    base_ckpt: Checkpoint | None = None,
    model_config: dict | None = None,
    out_dir=None,
    log_path=None,
) -> TrainResult:
    """Deterministic training loop; returns the final checkpoint and losses.

    ``model_config`` carries {"backbone": BackboneConfig, "prism": PrismConfig}
    overrides for the adapter phase; the base phase always builds an
    injection-free backbone.
    """
    torch.set_num_threads(1)  # sync overhead beats gains at this scale
    if cfg.phase == "aicl" and base_ckpt is None:
        raise ConfigurationError("adapter phase requires a base checkpoint")
    if cfg.phase == "aicl" and verbs is None:
        raise ConfigurationError("adapter phase requires a verb list")

    model_config = model_config or {}
    if cfg.phase == "base":
        bcfg = model_config.get("backbone") or BackboneConfig()
        if bcfg.conditioned:
            bcfg = BackboneConfig.from_dict({**bcfg.to_dict(), "injection": []})
        vocab = model_config.get("vocab")
        if vocab is None:
            vocab = Vocabulary.load(Path(corpus_root) / "vocab.txt")
        model = VideoDiffusionModel(bcfg, vocab, None, seed=cfg.seed)
    else:
        vocab = Vocabulary(tokens=tuple(base_ckpt.vocabulary))
        base_bcfg = BackboneConfig.from_dict(base_ckpt.model_config["backbone"])
        bcfg = model_config.get("backbone") or BackboneConfig.from_dict(
            {**base_bcfg.to_dict(), "injection": ["temporal"]}
        )
        if not bcfg.conditioned:
            raise ConfigurationError("adapter phase needs at least one injection axis")
        pcfg = model_config.get("prism") or PrismConfig()
        model = VideoDiffusionModel(bcfg, vocab, pcfg, seed=cfg.seed)
        _load_into(model, base_ckpt.params, strict=False)

    freeze_for_phase(model)
    opt = make_optimizer(model, cfg)
    sched = model_config.get("schedule") or (
        schedule_from_checkpoint(base_ckpt) if base_ckpt else make_schedule()
    )

    videos = [load_video(corpus_root, e) for e in manifest.entries]
    master = torch.Generator().manual_seed(cfg.seed)

    losses = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    t_start = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            idx = torch.randint(len(manifest.entries), (cfg.batch_size,), generator=master)
            batch = []
            for j in idx.tolist():
                entry = manifest.entries[j]
                sample = TrainSample(caption=entry.caption, video=videos[j])
                if cfg.phase == "aicl":
                    rng = random.Random(cfg.seed * 1_000_003 + step * 101 + j)
                    refs, n_eligible = select_references(
                        entry.caption, manifest, verbs, k=1, rng=rng
                    )
                    if not refs:
                        raise ConfigurationError(
                            f"no eligible reference for caption {entry.caption!r}"
                        )
                    ref_caption, ref_path = refs[0]
                    ref_idx = next(
                        i for i, e in enumerate(manifest.entries) if e.video == ref_path
                    )
                    sample.ref_caption = ref_caption
                    sample.ref_video = videos[ref_idx]
                batch.append(sample)
            loss = training_step(model, sched, batch, opt, cfg.phase, master)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step}")
            losses.append(loss)
            if log_fh:
                log_fh.write(
                    json.dumps(
                        {
                            "step": step,
                            "loss": loss,
                            "wall_time": time.perf_counter() - t_start,
                        }
                    )
                    + "\n"
                )
            if (
                out_dir
                and cfg.checkpoint_every
                and step % cfg.checkpoint_every == 0
                and step < cfg.steps
            ):
                save_checkpoint(
                    Path(out_dir) / f"step_{step:06d}",
                    checkpoint_from_model(model, sched, cfg),
                )
    finally:
        if log_fh:
            log_fh.close()

    ckpt = checkpoint_from_model(model, sched, cfg)
    if out_dir:
        save_checkpoint(out_dir, ckpt)
    return TrainResult(checkpoint=ckpt, losses=losses)
