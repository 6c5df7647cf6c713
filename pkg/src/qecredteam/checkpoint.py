"""Versioned JSON checkpoints for decoder and actor parameters.

Floats go through ``json`` which writes Python's shortest round-trip repr,
so a load reproduces parameters bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .autodiff import ParamStore
from .errors import CheckpointError

FORMAT = "qecredteam-checkpoint"
VERSION = 1


def save(path: str | Path, kind: str, config: dict, seed: int, params: ParamStore, provenance: dict | None = None) -> None:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "seed": seed,
        "provenance": provenance or {},
        "params": params.to_dict(),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load(path: str | Path, kind: str | None = None) -> dict[str, Any]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: missing format tag {FORMAT!r}")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')} != supported {VERSION}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')!r}")
    payload["params"] = ParamStore.from_dict(payload["params"])
    return payload
