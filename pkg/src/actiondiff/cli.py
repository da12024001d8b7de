"""Command line entry point binding all subcommands.

Every subcommand is a pure function of its flags, config file, input files,
and seed. Usage errors exit 2; runtime failures print a diagnostic and
exit 1.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from . import AIVF_FORMAT_VERSION, CHECKPOINT_FORMAT_VERSION, __version__
from .errors import ConfigurationError

VERSION_TEXT = (
    f"actiondiff {__version__} "
    f"(aivf format {AIVF_FORMAT_VERSION}, checkpoint format {CHECKPOINT_FORMAT_VERSION})"
)


def _resolve(workdir: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else workdir / p


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actiondiff",
        description="desk-scale video diffusion with reference-video action conditioning",
    )
    parser.add_argument("--version", action="version", version=VERSION_TEXT)
    parser.add_argument(
        "--workdir", default=".", help="root that relative paths resolve against"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="render the synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("select-refs", help="pick reference videos for a caption")
    p.add_argument("--caption", required=True)
    p.add_argument("--corpus", required=True, help="corpus manifest (jsonl)")
    p.add_argument("--lexicon", required=True, help="verb lexicon, one form per line")
    p.add_argument("-k", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("train", help="train the base model or the adapters")
    p.add_argument("--phase", choices=("base", "aicl"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True, help="training manifest (jsonl)")
    p.add_argument("--init", default=None, help="base checkpoint (adapter phase)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("generate", help="sample a video from a caption")
    p.add_argument("--caption", required=True)
    p.add_argument(
        "--refs",
        default=None,
        help="manifest (jsonl) to select from, or comma-separated aivf paths",
    )
    p.add_argument("-k", type=int, default=1)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output aivf path")
    p.add_argument("--dump-attn", default=None, help="dir for attention-score grids")

    p = sub.add_parser("eval", help="run the experiment matrix")
    p.add_argument("--grid", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("ablate", help="run only the wiring-variant grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)

    return parser


def _cmd_make_data(args, workdir: Path) -> int:
    from .configio import read_config
    from .synthdata import CorpusConfig, build_corpus

    cfg_raw = read_config(_resolve(workdir, args.config)).get("corpus", {})
    cfg = CorpusConfig(seed=args.seed, **cfg_raw)
    out = _resolve(workdir, args.out)
    manifests = build_corpus(cfg, out)
    for split, manifest in manifests.items():
        print(f"{split}: {len(manifest)} clips -> {out / (split + '.jsonl')}")
    return 0


def _cmd_select_refs(args, workdir: Path) -> int:
    from .conditioning import CorpusManifest, build_verb_list, select_references

    manifest = CorpusManifest.load(_resolve(workdir, args.corpus))
    verbs = build_verb_list(manifest, _resolve(workdir, args.lexicon))
    refs, eligible = select_references(
        args.caption, manifest, verbs, args.k, random.Random(args.seed)
    )
    for _, path in refs:
        print(path)
    print(f"# eligible: {eligible}", file=sys.stderr)
    return 0


def _train_model_config(cfg: dict):
    from .backbone import BackboneConfig
    from .prism import PrismConfig
    from .schedule import make_schedule

    out = {}
    if "model" in cfg:
        out["backbone"] = BackboneConfig.from_dict(
            {**BackboneConfig().to_dict(), **cfg["model"]}
        )
    if "prism" in cfg:
        out["prism"] = PrismConfig.from_dict(
            {**PrismConfig().to_dict(), **cfg["prism"]}
        )
    if "schedule" in cfg:
        s = cfg["schedule"]
        out["schedule"] = make_schedule(
            s.get("t", 50), s.get("beta_start", 1e-4), s.get("beta_end", 2e-2),
            s.get("kind", "linear"),
        )
    return out


def _cmd_train(args, workdir: Path) -> int:
    from .conditioning import CorpusManifest, build_verb_list
    from .configio import read_config
    from .trainer import TrainConfig, load_checkpoint, run_training

    cfg = read_config(_resolve(workdir, args.config))
    tr = dict(cfg.get("train", {}))
    tr.pop("phase", None)
    betas = (tr.pop("beta1", 0.9), tr.pop("beta2", 0.9))
    train_cfg = TrainConfig(phase=args.phase, betas=betas, seed=args.seed, **tr)

    manifest_path = _resolve(workdir, args.corpus)
    corpus_root = manifest_path.parent
    manifest = CorpusManifest.load(manifest_path)

    base_ckpt = None
    verbs = None
    if args.phase == "aicl":
        if args.init is None:
            raise ConfigurationError("--init is required for the adapter phase")
        base_ckpt = load_checkpoint(_resolve(workdir, args.init))
        verbs = build_verb_list(manifest, corpus_root / "verbs.txt")

    out = _resolve(workdir, args.out)
    result = run_training(
        train_cfg,
        corpus_root,
        manifest,
        verbs=verbs,
        base_ckpt=base_ckpt,
        model_config=_train_model_config(cfg),
        out_dir=out,
        log_path=out / "loss_log.jsonl" if train_cfg.steps else None,
    )
    last = result.losses[-1] if result.losses else float("nan")
    print(f"{args.phase} training: {len(result.losses)} steps, final loss {last:.5f}")
    print(f"checkpoint -> {out}")
    return 0


def _cmd_generate(args, workdir: Path) -> int:
    from .conditioning import CorpusManifest, build_verb_list, select_references
    from .sampler import generate, load_for_generation
    from .synthdata import write_aivf

    model, sched = load_for_generation(_resolve(workdir, args.ckpt))

    refs = []
    ref_root = None
    if args.refs:
        candidate = _resolve(workdir, args.refs)
        if candidate.suffix == ".jsonl" and candidate.exists():
            manifest = CorpusManifest.load(candidate)
            verbs = build_verb_list(manifest, candidate.parent / "verbs.txt")
            refs, eligible = select_references(
                args.caption, manifest, verbs, args.k, random.Random(args.seed)
            )
            ref_root = candidate.parent
            print(f"# selected {len(refs)} of {eligible} eligible references",
                  file=sys.stderr)
        else:
            # explicit clips carry no captions; the prompt stands in
            paths = [s.strip() for s in args.refs.split(",") if s.strip()]
            refs = [(args.caption, str(_resolve(workdir, p))) for p in paths[: args.k]]

    video, report = generate(
        args.caption,
        refs,
        model,
        sched,
        steps=args.steps,
        sampler=args.sampler,
        eta=args.eta,
        seed=args.seed,
        ref_root=ref_root,
        dump_attn_dir=_resolve(workdir, args.dump_attn) if args.dump_attn else None,
    )
    out = _resolve(workdir, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_aivf(out, video)
    report_path = out.with_suffix(out.suffix + ".report.json")
    report_path.write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    print(f"video -> {out}")
    print(f"report -> {report_path}")
    return 0


def _cmd_eval(args, workdir: Path, ablate_only: bool = False) -> int:
    from .configio import read_config
    from .evaluation import GridConfig, MatrixContext, run_matrix

    raw = dict(read_config(_resolve(workdir, args.grid)).get("grid", {}))
    corpus = raw.pop("corpus", None)
    if corpus is None:
        raise ConfigurationError("the [grid] section needs a corpus = <dir> entry")
    if ablate_only:
        raw["experiments"] = ("ablation",)
    grid = GridConfig(seed=args.seed, **raw)
    ctx = MatrixContext.build(
        _resolve(workdir, corpus), _resolve(workdir, args.ckpt_dir), clf_seed=args.seed
    )
    out = _resolve(workdir, args.out)
    report = run_matrix(grid, ctx, out_dir=out)
    print(report.render_table())
    print(f"report -> {out}")
    return 0


COMMANDS = {
    "make-data": _cmd_make_data,
    "select-refs": _cmd_select_refs,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "ablate": lambda args, workdir: _cmd_eval(args, workdir, ablate_only=True),
}


def dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    workdir = Path(args.workdir)
    try:
        return COMMANDS[args.command](args, workdir)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    entry()
