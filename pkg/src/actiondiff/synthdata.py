"""Deterministic moving-shapes video corpus with captioned actions.

Shapes (square, circle, bar) follow closed-form motion kernels over the frame
index: translation, rotation, scaling, bouncing, zigzag. Each action owns a
continuous and a past verb form; captions come from the templates
"a <shape> is <verb>" / "a <shape> <verb-past>". Rotation actions skip the
circle, whose orientation is invisible.

Videos are anti-aliased by subpixel supersampling and serialized in the AIVF
container: magic ``AIVF``, u32 version, u32 D/C/H/W (little endian), then
D*C*H*W little-endian f32 values, frame major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import AIVF_FORMAT_VERSION
from .conditioning import CorpusEntry, CorpusManifest, Vocabulary
from .errors import ConfigurationError, ContractError, GenerationError

SHAPES = ("square", "circle", "bar")
SPEED_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5)
SUPERSAMPLE = 4
EDGE_MARGIN = 0.2


@dataclass(frozen=True)
class Pose:
    cx: float
    cy: float
    size: float   # half extent in pixels
    angle: float  # radians, screen clockwise


@dataclass(frozen=True)
class ActionSpec:
    """Closed-form motion kernel plus its caption verb surface forms."""

    name: str
    verb: str
    verb_past: str
    kernel: callable = field(repr=False, default=None)
    shapes: tuple[str, ...] = SHAPES
    start: tuple[float, float] = (8.0, 8.0)

    def pose_at(self, base: Pose, frame: int, speed: float) -> Pose:
        dx, dy, dangle, scale = self.kernel(frame, speed)
        return Pose(
            cx=base.cx + dx,
            cy=base.cy + dy,
            size=base.size * scale,
            angle=base.angle + dangle,
        )


def _triangle(u: float) -> float:
    # unit triangle wave, zero at u=0, amplitude 1, period 2
    return (2.0 / np.pi) * np.arcsin(np.sin(np.pi * u))


def _actions() -> dict[str, ActionSpec]:
    specs = [
        ActionSpec("translate_right", "sliding", "slid",
                   lambda f, s: (0.55 * s * f, 0.0, 0.0, 1.0), start=(4.3, 8.0)),
        ActionSpec("translate_left", "drifting", "drifted",
                   lambda f, s: (-0.55 * s * f, 0.0, 0.0, 1.0), start=(11.7, 8.0)),
        ActionSpec("rotate_cw", "spinning", "spun",
                   lambda f, s: (0.0, 0.0, 0.14 * s * f, 1.0),
                   shapes=("square", "bar")),
        ActionSpec("rotate_ccw", "twirling", "twirled",
                   lambda f, s: (0.0, 0.0, -0.14 * s * f, 1.0),
                   shapes=("square", "bar")),
        ActionSpec("grow", "growing", "grew",
                   lambda f, s: (0.0, 0.0, 0.0, 1.0 + 0.07 * s * f)),
        ActionSpec("shrink", "shrinking", "shrank",
                   lambda f, s: (0.0, 0.0, 0.0, 1.0 - 0.06 * s * f)),
        ActionSpec("bounce", "bouncing", "bounced",
                   lambda f, s: (0.0, -2.2 * abs(np.sin(np.pi * 0.13 * s * f)), 0.0, 1.0),
                   start=(8.0, 9.3)),
        ActionSpec("zigzag", "zigzagging", "zigzagged",
                   lambda f, s: (0.3 * s * f, 1.8 * _triangle(0.35 * s * f), 0.0, 1.0),
                   start=(5.5, 8.0)),
    ]
    return {a.name: a for a in specs}


ACTIONS = _actions()


def caption_for(action: ActionSpec, shape: str, tense: str = "continuous") -> str:
    if tense == "continuous":
        return f"a {shape} is {action.verb}"
    return f"a {shape} {action.verb_past}"


def verb_lexicon() -> list[str]:
    """Every verb surface form of every action, both tenses."""
    forms = []
    for a in ACTIONS.values():
        forms.extend([a.verb, a.verb_past])
    return forms


def corpus_vocabulary() -> Vocabulary:
    words = ["a", "is"] + list(SHAPES) + verb_lexicon()
    return Vocabulary.build(words)


# --- rasterization ---------------------------------------------------------

def _indicator(shape: str, u: np.ndarray, v: np.ndarray, size: float) -> np.ndarray:
    if shape == "square":
        return (np.maximum(np.abs(u), np.abs(v)) <= size).astype(np.float64)
    if shape == "circle":
        return (u * u + v * v <= size * size).astype(np.float64)
    if shape == "bar":
        return ((np.abs(u) <= size) & (np.abs(v) <= size / 3.0)).astype(np.float64)
    raise ConfigurationError(f"unknown shape {shape!r}")


def _bounding_radius(shape: str, size: float) -> float:
    if shape == "square":
        return size * np.sqrt(2.0)
    if shape == "circle":
        return size
    return size * np.sqrt(1.0 + 1.0 / 9.0)


def rasterize(shape: str, pose: Pose, height: int, width: int,
              supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Coverage image [H, W] in [0, 1] of the posed shape."""
    r = _bounding_radius(shape, pose.size)
    if (pose.cx - r < EDGE_MARGIN or pose.cy - r < EDGE_MARGIN
            or pose.cx + r > width - EDGE_MARGIN or pose.cy + r > height - EDGE_MARGIN):
        raise GenerationError(
            f"{shape} at ({pose.cx:.2f}, {pose.cy:.2f}) size {pose.size:.2f} "
            f"leaves the {width}x{height} frame"
        )
    ss = supersample
    xs = (np.arange(width * ss) + 0.5) / ss
    ys = (np.arange(height * ss) + 0.5) / ss
    gx, gy = np.meshgrid(xs, ys)
    dx, dy = gx - pose.cx, gy - pose.cy
    c, s = np.cos(pose.angle), np.sin(pose.angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    mask = _indicator(shape, u, v, pose.size)
    return mask.reshape(height, ss, width, ss).mean(axis=(1, 3))


@dataclass(frozen=True)
class SampleRecord:
    video: torch.Tensor  # [D, 1, H, W] float32 in [0, 1]
    caption: str
    action: str
    seed: int
    shape: str = ""
    speed: float = 1.0


def render_sample(
    action: ActionSpec | str,
    shape: str,
    seed: int,
    frames: int = 8,
    height: int = 16,
    width: int = 16,
    speed: float = 1.0,
    tense: str = "continuous",
) -> SampleRecord:
    """Render one captioned clip, deterministic in its arguments."""
    if isinstance(action, str):
        action = ACTIONS[action]
    if shape not in action.shapes:
        raise ConfigurationError(f"shape {shape!r} not usable with {action.name}")
    if height % 2 or width % 2:
        raise ContractError("height and width must be even for the codec")
    rng = np.random.default_rng(seed)
    base = Pose(
        cx=action.start[0] * width / 16.0 + rng.uniform(-0.4, 0.4),
        cy=action.start[1] * height / 16.0 + rng.uniform(-0.4, 0.4),
        size=rng.uniform(2.0, 2.5) * min(height, width) / 16.0,
        angle=rng.uniform(-0.15, 0.15),
    )
    frames_out = np.stack(
        [
            rasterize(shape, action.pose_at(base, f, speed), height, width)
            for f in range(frames)
        ]
    )
    video = torch.from_numpy(frames_out[:, None].astype(np.float32))
    return SampleRecord(
        video=video,
        caption=caption_for(action, shape, tense),
        action=action.name,
        seed=seed,
        shape=shape,
        speed=speed,
    )


# --- AIVF container --------------------------------------------------------

def write_aivf(path, video: torch.Tensor) -> None:
    """Serialize a [D, C, H, W] video as AIVF."""
    if video.dim() != 4:
        raise ContractError(f"expected [D, C, H, W] video, got {tuple(video.shape)}")
    d, c, h, w = video.shape
    arr = np.ascontiguousarray(video.detach().cpu().numpy(), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(b"AIVF")
        fh.write(struct.pack("<5I", AIVF_FORMAT_VERSION, d, c, h, w))
        fh.write(arr.tobytes())


def read_aivf(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"AIVF":
            raise ContractError(f"{path!r} is not an AIVF file")
        version, d, c, h, w = struct.unpack("<5I", fh.read(20))
        if version != AIVF_FORMAT_VERSION:
            raise ContractError(f"unsupported AIVF version {version}")
        data = np.frombuffer(fh.read(4 * d * c * h * w), dtype="<f4")
        if data.size != d * c * h * w:
            raise ContractError(f"{path!r} truncated")
    return torch.from_numpy(data.reshape(d, c, h, w).copy())


# --- corpus construction ---------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    train_actions: tuple[str, ...]
    held_actions: tuple[str, ...]
    reps: int = 4                 # clips per (action, shape, speed)
    held_reps: int = 4
    speeds: tuple[float, ...] = SPEED_SCALES
    frames: int = 8
    height: int = 16
    width: int = 16
    seed: int = 0
    past_fraction: float = 0.2

    def __post_init__(self):
        overlap = set(self.train_actions) & set(self.held_actions)
        if overlap:
            raise ConfigurationError(f"actions in both splits: {sorted(overlap)}")
        for name in tuple(self.train_actions) + tuple(self.held_actions):
            if name not in ACTIONS:
                raise ConfigurationError(f"unknown action {name!r}")
        if not self.train_actions:
            raise ConfigurationError("no training actions")


DEFAULT_TRAIN_ACTIONS = (
    "translate_right", "rotate_cw", "rotate_ccw", "grow", "bounce", "zigzag"
)
DEFAULT_HELD_ACTIONS = ("translate_left", "shrink")


def _split_records(actions, cfg: CorpusConfig, reps: int, salt: int):
    records = []
    idx = 0
    for action_name in actions:
        action = ACTIONS[action_name]
        for shape in action.shapes:
            for speed in cfg.speeds:
                for rep in range(reps):
                    seed = cfg.seed * 1_000_003 + salt * 101_159 + idx
                    rng = np.random.default_rng(seed + 7)
                    tense = "past" if rng.uniform() < cfg.past_fraction else "continuous"
                    records.append(
                        render_sample(
                            action, shape, seed,
                            frames=cfg.frames, height=cfg.height, width=cfg.width,
                            speed=speed, tense=tense,
                        )
                    )
                    idx += 1
    return records


def build_corpus(cfg: CorpusConfig, out_dir) -> dict:
    """Render both splits, write AIVF files, manifests, vocab, and lexicon.

    Held-out actions never enter the training manifest; they form a separate
    reference pool. Fully reproducible from the config seed.
    """
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)

    splits = {
        "train": _split_records(cfg.train_actions, cfg, cfg.reps, salt=1),
        "heldout": _split_records(cfg.held_actions, cfg, cfg.held_reps, salt=2),
    }
    manifests = {}
    for split, records in splits.items():
        entries = []
        for i, rec in enumerate(records):
            rel = f"videos/{split}_{i:05d}_{rec.action}_{rec.shape}.aivf"
            write_aivf(out / rel, rec.video)
            entries.append(CorpusEntry(video=rel, caption=rec.caption, action=rec.action))
        manifest = CorpusManifest(entries=tuple(entries))
        manifest.save(out / f"{split}.jsonl")
        manifests[split] = manifest

    corpus_vocabulary().save(out / "vocab.txt")
    (out / "verbs.txt").write_text("\n".join(verb_lexicon()) + "\n", encoding="utf-8")
    return manifests


def load_video(corpus_root, entry: CorpusEntry) -> torch.Tensor:
    return read_aivf(Path(corpus_root) / entry.video)
