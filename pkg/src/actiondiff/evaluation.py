"""Metrics and the experiment matrix.

Frame features are projections of centered pixels onto a fixed orthogonal
image basis (mean, ramps, radial and diagonal moments, low sinusoids); they
stand in for a pretrained image encoder. Frame consistency is the mean cosine
between consecutive frame features. Action accuracy comes from a small
logistic-regression classifier over temporal statistics of those features,
trained only on real videos from the corpus splits.

The matrix runner executes the declared grid: reference-count sweep, speed
groups, unseen-action captions, mismatched references, and the nine wiring
variants, each cell from its own recorded seed.
"""

from __future__ import annotations

import hashlib
import json
import random
import time
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, VideoDiffusionModel, wiring_hash
from .conditioning import CorpusManifest, VerbList, build_verb_list, select_references
from .errors import ConfigurationError, ContractError
from .prism import PrismConfig
from .sampler import generate
from .synthdata import ACTIONS, load_video

# --- frame features --------------------------------------------------------

@lru_cache(maxsize=8)
def feature_basis(height: int, width: int) -> np.ndarray:
    """[K, H*W] orthonormal-ish basis; all rows except DC are zero-mean."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    u, v = x - cx, y - cy
    raw = [
        np.ones_like(u),
        u,
        v,
        u * u + v * v,
        u * v,
        u * u - v * v,
        np.sin(2 * np.pi * x / width),
        np.sin(2 * np.pi * y / height),
    ]
    rows = []
    for i, img in enumerate(raw):
        if i > 0:
            img = img - img.mean()
        rows.append(img.ravel() / np.linalg.norm(img.ravel()))
    return np.stack(rows)


def frame_features(video: torch.Tensor) -> np.ndarray:
    """[D, C, H, W] video -> [D, K] centered basis projections per frame."""
    if video.dim() != 4:
        raise ContractError(f"expected [D, C, H, W] video, got {tuple(video.shape)}")
    d, c, h, w = video.shape
    frames = video.double().mean(dim=1).reshape(d, h * w).numpy() - 0.5
    return frames @ feature_basis(h, w).T


def frame_consistency(video: torch.Tensor, feat=frame_features) -> float:
    """Mean cosine similarity between consecutive frame feature vectors."""
    if video.shape[0] < 2:
        raise ContractError("frame consistency needs at least 2 frames")
    f = np.asarray(feat(video), dtype=np.float64)
    sims = []
    for a, b in zip(f[:-1], f[1:]):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            warnings.warn("zero-norm frame features; pair excluded")
            continue
        sims.append(float(a @ b / (na * nb)))
    return float(np.mean(sims)) if sims else float("nan")


# --- toy action classifier --------------------------------------------------

XY_IDX, DIFF_IDX = 4, 5  # diagonal and axis-difference second moments


def video_features(video: torch.Tensor) -> np.ndarray:
    """Temporal statistics of the frame features, as classifier input."""
    f = frame_features(video)
    df = np.diff(f, axis=0)
    half = max(1, df.shape[0] // 2)
    rot = float(np.mean(f[:-1, XY_IDX] * df[:, DIFF_IDX] - f[:-1, DIFF_IDX] * df[:, XY_IDX]))
    return np.concatenate(
        [
            f.mean(axis=0),
            df.mean(axis=0),
            np.abs(df).mean(axis=0),
            df.std(axis=0),
            df[half:].mean(axis=0) - df[:half].mean(axis=0),
            [rot],
        ]
    )


class ToyClassifier:
    """Logistic regression over motion statistics of real videos only."""

    def __init__(self, seed: int = 0, c: float = 10.0, max_iter: int = 3000):
        from sklearn.linear_model import LogisticRegression
        from sklearn.pipeline import make_pipeline
        from sklearn.preprocessing import StandardScaler

        self.seed = seed
        self.pipeline = make_pipeline(
            StandardScaler(),
            LogisticRegression(C=c, max_iter=max_iter, random_state=seed),
        )
        self.classes_ = None

    def fit(self, videos, labels) -> "ToyClassifier":
        x = np.stack([video_features(v) for v in videos])
        self.pipeline.fit(x, np.asarray(labels))
        self.classes_ = tuple(self.pipeline.classes_)
        return self

    def predict(self, videos):
        x = np.stack([video_features(v) for v in videos])
        return list(self.pipeline.predict(x))

    def predict_proba(self, videos) -> np.ndarray:
        x = np.stack([video_features(v) for v in videos])
        return self.pipeline.predict_proba(x)

    def prob_of(self, videos, label: str) -> np.ndarray:
        if label not in self.classes_:
            raise ContractError(f"label {label!r} unknown to the classifier")
        idx = self.classes_.index(label)
        return self.predict_proba(videos)[:, idx]


def classifier_accuracy(videos, labels, clf: ToyClassifier) -> float:
    """Top-1 accuracy of the classifier against intended action labels."""
    labels = list(labels)
    if clf.classes_ is None:
        raise ContractError("classifier is not trained")
    for lab in labels:
        if lab not in clf.classes_:
            raise ContractError(f"label {lab!r} not among classifier classes")
    pred = clf.predict(videos)
    return float(np.mean([p == t for p, t in zip(pred, labels)]))


def train_classifier(corpus_root, manifests, seed: int = 0) -> ToyClassifier:
    """Fit on the real videos of the given manifests (never on generations)."""
    videos, labels = [], []
    for manifest in manifests:
        for entry in manifest.entries:
            videos.append(load_video(corpus_root, entry))
            labels.append(entry.action)
    return ToyClassifier(seed=seed).fit(videos, labels)


def centroid_path(video: torch.Tensor) -> np.ndarray:
    """[D, 2] intensity-weighted centroid (x, y) per frame."""
    d, c, h, w = video.shape
    frames = video.double().mean(dim=1).numpy()
    y, x = np.mgrid[0:h, 0:w]
    out = np.zeros((d, 2))
    for f in range(d):
        mass = frames[f].sum()
        if mass <= 1e-9:
            out[f] = ((w - 1) / 2.0, (h - 1) / 2.0)
        else:
            out[f] = ((frames[f] * x).sum() / mass, (frames[f] * y).sum() / mass)
    return out


def trajectory_error(video: torch.Tensor, action: str, speed: float = 1.0) -> float:
    """Mean distance between generated and kernel-ideal centroid displacement."""
    kernel = ACTIONS[action].kernel
    path = centroid_path(video)
    rel = path - path[0]
    err = 0.0
    for f in range(video.shape[0]):
        dx, dy, _, _ = kernel(f, speed)
        err += float(np.hypot(rel[f, 0] - dx, rel[f, 1] - dy))
    return err / video.shape[0]


# --- wiring variants --------------------------------------------------------

_DEFAULT_ROW = {
    "use_self_attn": True,
    "cross_qk_role": "video_query",
    "cross_axes": ("spatial",),
    "injection": ("temporal",),
}

VARIANTS = {
    1: {**_DEFAULT_ROW, "use_self_attn": False},
    2: {**_DEFAULT_ROW, "cross_qk_role": "text_query"},
    3: dict(_DEFAULT_ROW),
    4: {**_DEFAULT_ROW, "cross_axes": ("spatial", "temporal")},
    5: {**_DEFAULT_ROW, "cross_axes": ("temporal",)},
    6: dict(_DEFAULT_ROW),
    7: {**_DEFAULT_ROW, "injection": ("spatial",)},
    8: {**_DEFAULT_ROW, "injection": ("spatial", "temporal")},
    9: dict(_DEFAULT_ROW),
}

DEFAULT_VARIANT = 3


def variant_configs(
    row: int,
    prism: PrismConfig | None = None,
    backbone: BackboneConfig | None = None,
) -> tuple[PrismConfig, BackboneConfig]:
    """Prism/backbone configs for one ablation row, on top of the defaults."""
    if row not in VARIANTS:
        raise ConfigurationError(f"unknown variant {row}; expected 1..9")
    spec = VARIANTS[row]
    prism = prism or PrismConfig()
    backbone = backbone or BackboneConfig()
    pcfg = PrismConfig.from_dict(
        {
            **prism.to_dict(),
            "use_self_attn": spec["use_self_attn"],
            "cross_qk_role": spec["cross_qk_role"],
            "cross_axes": list(spec["cross_axes"]),
        }
    )
    bcfg = BackboneConfig.from_dict(
        {**backbone.to_dict(), "injection": list(spec["injection"])}
    )
    return pcfg, bcfg


# --- experiment matrix ------------------------------------------------------

KNOWN_EXPERIMENTS = ("kshot", "mismatch", "unseen", "speed", "ablation")


@dataclass(frozen=True)
class GridConfig:
    experiments: tuple[str, ...] = ()
    generations: int = 50
    k_values: tuple[int, ...] = (0, 1, 2, 3)
    steps: int = 50
    sampler: str = "ddim"
    eta: float = 0.0
    seed: int = 0
    ablation_steps: int = 50
    speed_generations: int = 10

    def __post_init__(self):
        for e in self.experiments:
            if e not in KNOWN_EXPERIMENTS:
                raise ConfigurationError(f"unknown experiment {e!r}")

    def to_dict(self) -> dict:
        return {
            "experiments": list(self.experiments),
            "generations": self.generations,
            "k_values": list(self.k_values),
            "steps": self.steps,
            "sampler": self.sampler,
            "eta": self.eta,
            "seed": self.seed,
            "ablation_steps": self.ablation_steps,
            "speed_generations": self.speed_generations,
        }

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    runtime: dict = field(default_factory=dict)
    config_hash: str = ""

    def add(self, variant, condition, metric, value, seed):
        self.rows.append(
            {
                "variant": str(variant),
                "condition": str(condition),
                "metric": str(metric),
                "value": None if value is None else float(value),
                "seed": int(seed),
            }
        )

    def values(self, variant=None, condition=None, metric=None) -> list:
        out = []
        for r in self.rows:
            if variant is not None and r["variant"] != variant:
                continue
            if condition is not None and r["condition"] != condition:
                continue
            if metric is not None and r["metric"] != metric:
                continue
            out.append(r["value"])
        return out

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "rows.jsonl", "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        (out / "runtime.json").write_text(
            json.dumps(
                {"config_hash": self.config_hash, "runtime": self.runtime},
                sort_keys=True,
                indent=1,
            )
            + "\n",
            encoding="utf-8",
        )
        (out / "table.txt").write_text(self.render_table(), encoding="utf-8")

    def render_table(self) -> str:
        if not self.rows:
            return "(empty report)\n"
        headers = ("variant", "condition", "metric", "value", "seed")
        widths = {h: len(h) for h in headers}
        cells = []
        for r in self.rows:
            row = {
                h: ("" if r[h] is None else
                    f"{r[h]:.4f}" if h == "value" else str(r[h]))
                for h in headers
            }
            for h in headers:
                widths[h] = max(widths[h], len(row[h]))
            cells.append(row)
        lines = [
            "  ".join(h.ljust(widths[h]) for h in headers),
            "  ".join("-" * widths[h] for h in headers),
        ]
        for row in cells:
            lines.append("  ".join(row[h].ljust(widths[h]) for h in headers))
        return "\n".join(lines) + "\n"


def _cell_seed(base: int, *parts) -> int:
    digest = hashlib.sha256(
        json.dumps([base, *[str(p) for p in parts]]).encode()
    ).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class MatrixContext:
    """Everything one matrix run needs: corpus, checkpoints, classifier."""

    corpus_root: Path
    train_manifest: CorpusManifest
    held_manifest: CorpusManifest
    verbs: VerbList
    clf: ToyClassifier
    base_ckpt_dir: Path | None = None
    aicl_ckpt_dir: Path | None = None

    @staticmethod
    def build(corpus_dir, ckpt_dir=None, clf_seed: int = 0) -> "MatrixContext":
        root = Path(corpus_dir)
        train = CorpusManifest.load(root / "train.jsonl")
        held = CorpusManifest.load(root / "heldout.jsonl")
        merged = CorpusManifest(entries=train.entries + held.entries)
        verbs = build_verb_list(merged, root / "verbs.txt")
        clf = train_classifier(root, [train, held], seed=clf_seed)
        base = aicl = None
        if ckpt_dir is not None:
            base_dir = Path(ckpt_dir) / "base"
            aicl_dir = Path(ckpt_dir) / "aicl"
            base = base_dir if (base_dir / "manifest.json").exists() else None
            aicl = aicl_dir if (aicl_dir / "manifest.json").exists() else None
        return MatrixContext(
            corpus_root=root,
            train_manifest=train,
            held_manifest=held,
            verbs=verbs,
            clf=clf,
            base_ckpt_dir=base,
            aicl_ckpt_dir=aicl,
        )


def matching_refs(manifest: CorpusManifest, action: str, k: int, rng: random.Random):
    """k same-action (caption, path) reference pairs, sampled without replacement."""
    pool = [e for e in manifest.entries if e.action == action]
    if len(pool) < k:
        raise ConfigurationError(f"not enough {action!r} entries for k={k}")
    return [(e.caption, e.video) for e in rng.sample(pool, k)]


def mismatched_refs(
    manifest: CorpusManifest, action: str, k: int, rng: random.Random
):
    """k reference pairs whose action differs from the target action."""
    pool = [e for e in manifest.entries if e.action != action]
    return [(e.caption, e.video) for e in rng.sample(pool, k)]


def generation_metrics(video, caption_action: str, clf: ToyClassifier, speed=1.0):
    probs = clf.prob_of([video], caption_action)[0]
    return {
        "acc": float(clf.predict([video])[0] == caption_action),
        "cc_proxy": float(probs),
        "fc": frame_consistency(video),
        "traj_err": trajectory_error(video, caption_action, speed),
    }


def _absent(report: EvalReport, variant: str, condition: str, seed: int) -> None:
    report.add(variant, condition, "absent_checkpoint", 1.0, seed)


def run_matrix(grid: GridConfig, ctx: MatrixContext, out_dir=None) -> EvalReport:
    """Execute the declared experiment grid cell by cell.

    Cells are independent seeded jobs run serially; a missing checkpoint is
    recorded as absent and the matrix continues.
    """
    from .sampler import load_for_generation

    torch.set_num_threads(1)
    report = EvalReport(config_hash=grid.hash())
    gen_experiments = [e for e in grid.experiments if e != "ablation"]

    model = sched = None
    if gen_experiments:
        if ctx.aicl_ckpt_dir is None:
            for exp in gen_experiments:
                _absent(report, "aicl", exp, grid.seed)
            gen_experiments = []
        else:
            model, sched = load_for_generation(ctx.aicl_ckpt_dir)

    for exp in gen_experiments:
        t_exp = time.perf_counter()
        cond_seconds = {}
        if exp == "kshot":
            held_actions = sorted({e.action for e in ctx.held_manifest.entries})
            for k in grid.k_values:
                cond = f"kshot_k{k}"
                cond_seconds[cond] = 0.0
                for g in range(grid.generations):
                    seed = _cell_seed(grid.seed, exp, k, g)
                    rng = random.Random(seed)
                    action = held_actions[g % len(held_actions)]
                    shape = rng.choice(ACTIONS[action].shapes)
                    caption = f"a {shape} is {ACTIONS[action].verb}"
                    refs = matching_refs(ctx.held_manifest, action, k, rng)
                    video, rep = generate(
                        caption, refs, model, sched,
                        steps=grid.steps, sampler=grid.sampler, eta=grid.eta,
                        seed=seed, ref_root=ctx.corpus_root,
                    )
                    cond_seconds[cond] += rep.stage_seconds["conditioning"]
                    for metric, value in generation_metrics(
                        video, action, ctx.clf
                    ).items():
                        report.add("aicl", cond, metric, value, seed)
        elif exp == "mismatch":
            train_actions = sorted({e.action for e in ctx.train_manifest.entries})
            for cond, k in (("mismatch_k1", 1), ("unconditioned_train", 0)):
                cond_seconds[cond] = 0.0
                for g in range(grid.generations):
                    seed = _cell_seed(grid.seed, exp, cond, g)
                    rng = random.Random(seed)
                    action = train_actions[g % len(train_actions)]
                    shape = rng.choice(ACTIONS[action].shapes)
                    caption = f"a {shape} is {ACTIONS[action].verb}"
                    refs = (
                        mismatched_refs(ctx.train_manifest, action, k, rng) if k else []
                    )
                    video, rep = generate(
                        caption, refs, model, sched,
                        steps=grid.steps, sampler=grid.sampler, eta=grid.eta,
                        seed=seed, ref_root=ctx.corpus_root,
                    )
                    cond_seconds[cond] += rep.stage_seconds["conditioning"]
                    for metric, value in generation_metrics(
                        video, action, ctx.clf
                    ).items():
                        report.add("aicl", cond, metric, value, seed)
        elif exp == "unseen":
            held_actions = sorted({e.action for e in ctx.held_manifest.entries})
            for k in grid.k_values:
                cond = f"unseen_k{k}"
                cond_seconds[cond] = 0.0
                for g in range(grid.generations):
                    seed = _cell_seed(grid.seed, exp, k, g)
                    rng = random.Random(seed)
                    action = held_actions[g % len(held_actions)]
                    shape = rng.choice(ACTIONS[action].shapes)
                    word = "".join(rng.choice("bcdfghjklmnpqrstvwxz") for _ in range(4))
                    caption = f"a {shape} is {word}"
                    refs = matching_refs(ctx.held_manifest, action, k, rng)
                    video, rep = generate(
                        caption, refs, model, sched,
                        steps=grid.steps, sampler=grid.sampler, eta=grid.eta,
                        seed=seed, ref_root=ctx.corpus_root,
                    )
                    cond_seconds[cond] += rep.stage_seconds["conditioning"]
                    for metric, value in generation_metrics(
                        video, action, ctx.clf
                    ).items():
                        report.add("aicl", cond, metric, value, seed)
        elif exp == "speed":
            from .synthdata import SPEED_SCALES, render_sample

            train_actions = sorted({e.action for e in ctx.train_manifest.entries})
            for group, speed in enumerate(SPEED_SCALES, start=1):
                cond = f"speed_{group}"
                cond_seconds[cond] = 0.0
                for g in range(grid.speed_generations):
                    seed = _cell_seed(grid.seed, exp, group, g)
                    rng = random.Random(seed)
                    action = train_actions[g % len(train_actions)]
                    shape = rng.choice(ACTIONS[action].shapes)
                    caption = f"a {shape} is {ACTIONS[action].verb}"
                    ref = render_sample(
                        action, shape, seed=seed + 17, speed=speed
                    )
                    ref_path = ctx.corpus_root / f"_speed_ref_{group}_{g}.aivf"
                    from .synthdata import write_aivf

                    write_aivf(ref_path, ref.video)
                    video, rep = generate(
                        caption, [(ref.caption, str(ref_path))], model, sched,
                        steps=grid.steps, sampler=grid.sampler, eta=grid.eta,
                        seed=seed,
                    )
                    ref_path.unlink()
                    cond_seconds[cond] += rep.stage_seconds["conditioning"]
                    for metric, value in generation_metrics(
                        video, action, ctx.clf, speed=speed
                    ).items():
                        report.add("aicl", cond, metric, value, seed)
        report.runtime[exp] = {
            "wall_seconds": time.perf_counter() - t_exp,
            "conditioning_seconds": cond_seconds,
        }

    if "ablation" in grid.experiments:
        t_exp = time.perf_counter()
        _run_ablation(grid, ctx, report)
        report.runtime["ablation"] = {"wall_seconds": time.perf_counter() - t_exp}

    if out_dir is not None:
        report.save(out_dir)
    return report


def _run_ablation(grid: GridConfig, ctx: MatrixContext, report: EvalReport) -> None:
    """Instantiate and briefly train every wiring variant from the base model."""
    from .trainer import TrainConfig, load_checkpoint, run_training

    if ctx.base_ckpt_dir is None:
        _absent(report, "base", "ablation", grid.seed)
        return
    base = load_checkpoint(ctx.base_ckpt_dir)
    hashes = {}
    for row in sorted(VARIANTS):
        seed = _cell_seed(grid.seed, "ablation", row)
        pcfg, bcfg = variant_configs(row)
        cfg = TrainConfig(
            phase="aicl", steps=grid.ablation_steps, batch_size=4, seed=seed
        )
        result = run_training(
            cfg,
            ctx.corpus_root,
            ctx.train_manifest,
            verbs=ctx.verbs,
            base_ckpt=base,
            model_config={"backbone": bcfg, "prism": pcfg},
        )
        from .trainer import model_from_checkpoint

        model = model_from_checkpoint(result.checkpoint, seed=seed)
        hashes[row] = wiring_hash(model)
        n_params = sum(p.numel() for p in model.parameters())
        report.add(f"v{row}", "ablation", "param_count", n_params, seed)
        report.add(f"v{row}", "ablation", "final_loss", result.losses[-1], seed)
        report.add(
            f"v{row}", "ablation", "trained_steps", len(result.losses), seed
        )
    for row in sorted(VARIANTS):
        report.add(
            f"v{row}",
            "ablation",
            "wiring_matches_default",
            1.0 if hashes[row] == hashes[DEFAULT_VARIANT] else 0.0,
            _cell_seed(grid.seed, "ablation", row),
        )
    report.runtime["ablation_wiring_hashes"] = {
        f"v{row}": hashes[row] for row in sorted(VARIANTS)
    }
