"""Caption embedding and verb-overlap reference selection.

The text encoder is a learned lookup table over a closed synthetic-caption
lexicon, trained with the base model and frozen afterwards. Reference videos
are eligible when their caption shares at least one listed verb surface form
with the prompt; selection among eligible entries is uniform, without any
further filtering.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .errors import ConfigurationError, ContractError

UNKNOWN_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"
RESERVED_TOKENS = (UNKNOWN_TOKEN, PAD_TOKEN)
MAX_VOCAB = 256
DEFAULT_TEXT_DIM = 32


def tokenize(caption: str) -> list[str]:
    """Lowercase whitespace tokenization."""
    return caption.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    """Dense token -> id map with reserved unknown and padding ids."""

    tokens: tuple[str, ...]
    ids: dict = field(repr=False, default=None)

    def __post_init__(self):
        if len(self.tokens) > MAX_VOCAB:
            raise ConfigurationError(f"vocabulary exceeds {MAX_VOCAB} entries")
        if tuple(self.tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ConfigurationError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigurationError("duplicate vocabulary tokens")
        object.__setattr__(
            self, "ids", {tok: i for i, tok in enumerate(self.tokens)}
        )

    @staticmethod
    def build(words) -> "Vocabulary":
        extra = sorted(set(w.lower() for w in words) - set(RESERVED_TOKENS))
        return Vocabulary(tokens=RESERVED_TOKENS + tuple(extra))

    @property
    def unknown_id(self) -> int:
        return self.ids[UNKNOWN_TOKEN]

    @property
    def pad_id(self) -> int:
        return self.ids[PAD_TOKEN]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, caption: str) -> list[int]:
        toks = tokenize(caption)
        if not toks:
            raise ContractError("empty caption")
        return [self.ids.get(t, self.unknown_id) for t in toks]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return Vocabulary(tokens=tuple(line.strip() for line in lines if line.strip()))


class TextEmbedder(nn.Module):
    """Learned embedding table; one row per vocabulary token."""

    def __init__(self, vocab: Vocabulary, dim: int = DEFAULT_TEXT_DIM,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.vocab = vocab
        table = torch.empty(len(vocab), dim)
        if gen is None:
            gen = torch.Generator().manual_seed(0)
        table.normal_(0.0, 0.2, generator=gen)
        self.table = nn.Parameter(table)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def forward(self, caption: str) -> torch.Tensor:
        """[tokens, dim] embedding; unknown words map to the unknown row."""
        ids = torch.tensor(self.vocab.encode(caption), dtype=torch.long)
        return self.table[ids]

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table[ids]


def embed_caption(caption: str, vocab: Vocabulary, table: torch.Tensor) -> torch.Tensor:
    """Functional embedding lookup against an explicit table [len(vocab), dim]."""
    if table.shape[0] != len(vocab):
        raise ContractError(
            f"table rows {table.shape[0]} != vocabulary size {len(vocab)}"
        )
    ids = torch.tensor(vocab.encode(caption), dtype=torch.long)
    return table[ids]


@dataclass(frozen=True)
class CorpusEntry:
    video: str
    caption: str
    action: str | None = None


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[CorpusEntry, ...]
    annotation_mode: str = "cluster_prompt"  # or "raw_caption"

    def __post_init__(self):
        if self.annotation_mode not in ("cluster_prompt", "raw_caption"):
            raise ConfigurationError(
                f"unknown annotation mode {self.annotation_mode!r}"
            )
        for e in self.entries:
            if not e.caption:
                raise ContractError(f"empty caption for video {e.video!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                rec = {"video": e.video, "caption": e.caption}
                if e.action is not None:
                    rec["action"] = e.action
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def load(path, annotation_mode: str = "cluster_prompt") -> "CorpusManifest":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            entries.append(
                CorpusEntry(
                    video=rec["video"],
                    caption=rec["caption"],
                    action=rec.get("action"),
                )
            )
        return CorpusManifest(entries=tuple(entries), annotation_mode=annotation_mode)


@dataclass(frozen=True)
class VerbList:
    """Verb/phrase surface forms found in both the lexicon and the corpus."""

    verbs: frozenset

    def __post_init__(self):
        if not self.verbs:
            raise ConfigurationError("verb list is empty after the corpus scan")

    def __contains__(self, verb: str) -> bool:
        return verb in self.verbs

    def __iter__(self):
        return iter(sorted(self.verbs))

    def __len__(self) -> int:
        return len(self.verbs)


def caption_contains(caption: str, verb: str) -> bool:
    """Word membership; multi-word forms match as contiguous token runs."""
    toks = tokenize(caption)
    vtoks = tokenize(verb)
    if not vtoks:
        return False
    n = len(vtoks)
    return any(toks[i : i + n] == vtoks for i in range(len(toks) - n + 1))


def load_lexicon(path) -> list[str]:
    forms = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        form = line.strip().lower()
        if form and form not in forms:
            forms.append(form)
    if not forms:
        raise ConfigurationError(f"verb lexicon {path!r} is empty")
    return forms


def build_verb_list(corpus: CorpusManifest, lexicon) -> VerbList:
    """Keep the lexicon forms (any tense) that occur in >= 1 corpus caption."""
    forms = load_lexicon(lexicon) if isinstance(lexicon, (str, Path)) else [
        f.strip().lower() for f in lexicon if f.strip()
    ]
    if not forms:
        raise ConfigurationError("verb lexicon is empty")
    if not corpus.entries:
        raise ContractError("corpus is empty")
    present = {
        form
        for form in forms
        if any(caption_contains(e.caption, form) for e in corpus.entries)
    }
    return VerbList(verbs=frozenset(present))


def shares_listed_verb(c_ori: str, c_ref: str, verbs: VerbList) -> bool:
    """True when some listed verb occurs in both captions."""
    return any(
        caption_contains(c_ori, v) and caption_contains(c_ref, v) for v in verbs
    )


def select_references(
    c_ori: str,
    corpus: CorpusManifest,
    verbs: VerbList,
    k: int,
    rng: random.Random,
) -> tuple[list[tuple[str, str]], int]:
    """Sample up to k eligible (caption, video path) pairs, uniformly.

    Returns the selection and the eligible-set size; an empty selection is
    valid and signals fallback to unconditioned generation.
    """
    if k < 0:
        raise ContractError(f"k must be >= 0, got {k}")
    eligible = [
        e for e in corpus.entries if shares_listed_verb(c_ori, e.caption, verbs)
    ]
    take = min(k, len(eligible))
    chosen = rng.sample(eligible, take) if take else []
    return [(e.caption, e.video) for e in chosen], len(eligible)
