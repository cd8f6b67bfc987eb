"""JSON experiment configs: strict key checking and flag overrides."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .grouping import ConfigError

SECTIONS: dict[str, frozenset[str]] = {
    "train": frozenset({"model", "epochs", "batch_size", "lr", "momentum", "seeds", "task_weight", "jobs"}),
    "reg": frozenset({"lambda", "n_groups", "mode", "scope"}),
    "data": frozenset({"n_classes", "samples_per_class", "image_size", "sigma"}),
    "bench": frozenset({"shape", "n", "reps", "warmup", "seed", "parallel"}),
    "gradcheck": frozenset({"eps", "tol", "seed"}),
    "ortho_report": frozenset({"model", "model_file"}),
}
TOP_LEVEL = frozenset(SECTIONS) | {"out"}


def validate(raw: Any) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in SECTIONS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
    return raw


def load(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return validate(raw)


def resolve(raw: dict, section: str, flags: dict[str, Any]) -> dict:
    """Config-file values for ``section`` with every non-None flag layered on top."""
    out = dict(raw.get(section, {}))
    out.update({k: v for k, v in flags.items() if v is not None})
    return out
