"""Sectioned key/value config files, validated against printed schemas.

Unknown sections or keys are errors, so a misspelled variant flag fails loudly
instead of silently running the default wiring.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .errors import ConfigurationError


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {raw!r}")


def _strlist(raw: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in raw.split(",") if s.strip())


def _floatlist(raw: str) -> tuple[float, ...]:
    return tuple(float(s) for s in raw.split(",") if s.strip())


def _intlist(raw: str) -> tuple[int, ...]:
    return tuple(int(s) for s in raw.split(",") if s.strip())


SCHEMAS = {
    "corpus": {
        "train_actions": _strlist,
        "held_actions": _strlist,
        "reps": int,
        "held_reps": int,
        "speeds": _floatlist,
        "frames": int,
        "height": int,
        "width": int,
        "past_fraction": float,
    },
    "train": {
        "phase": str,
        "lr": float,
        "beta1": float,
        "beta2": float,
        "weight_decay": float,
        "batch_size": int,
        "steps": int,
        "lambda_vlb": float,
        "checkpoint_every": int,
    },
    "model": {
        "frames": int,
        "latent_size": int,
        "latent_channels": int,
        "channels": _intlist,
        "heads": int,
        "text_dim": int,
        "time_dim": int,
        "injection": _strlist,
        "feature_channels": int,
    },
    "prism": {
        "layers": int,
        "model_dim": int,
        "heads": int,
        "d_head": int,
        "text_dim_in": int,
        "text_dim_proj": int,
        "out_channels": int,
        "use_self_attn": _bool,
        "cross_qk_role": str,
        "cross_axes": _strlist,
        "pool_tokens": _bool,
    },
    "schedule": {
        "t": int,
        "beta_start": float,
        "beta_end": float,
        "kind": str,
    },
    "grid": {
        "experiments": _strlist,
        "corpus": str,
        "generations": int,
        "k_values": _intlist,
        "steps": int,
        "sampler": str,
        "eta": float,
        "ablation_steps": int,
        "speed_generations": int,
    },
}


def schema_text() -> str:
    lines = ["known config sections and keys:"]
    for section, keys in SCHEMAS.items():
        lines.append(f"  [{section}]")
        for key, parser in keys.items():
            lines.append(f"    {key}: {getattr(parser, '__name__', 'value')}")
    return "\n".join(lines)


def read_config(path) -> dict:
    """Parse one config file into {section: {key: typed value}}."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(path, encoding="utf-8")
    out = {}
    for section in parser.sections():
        if section not in SCHEMAS:
            raise ConfigurationError(
                f"unknown config section [{section}]\n{schema_text()}"
            )
        schema = SCHEMAS[section]
        values = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigurationError(
                    f"unknown key {key!r} in [{section}]\n{schema_text()}"
                )
            try:
                values[key] = schema[key](raw)
            except (ValueError, ConfigurationError) as exc:
                raise ConfigurationError(
                    f"bad value for {key!r} in [{section}]: {raw!r} ({exc})"
                ) from exc
        out[section] = values
    return out
