"""Provenance stamps shared by every file the command-line tool writes.

JSON documents carry a top-level ``meta`` object; CSV files carry it on a
leading ``# desknas-meta {...}`` comment line, which all readers skip.
"""

from __future__ import annotations

import json
from pathlib import Path

from . import __version__
from .space import SpaceSpec, space_hash

CSV_TAG = "desknas-meta"


def make_meta(spec: SpaceSpec, seed: int | None, command: str, **extra) -> dict:
    return {"tool": "desknas", "version": __version__, "space_hash": space_hash(spec),
            "seed": seed, "command": command, **extra}


def csv_comment(meta: dict) -> str:
    return f"{CSV_TAG} {json.dumps(meta, sort_keys=True)}"


def write_json(path: str | Path, meta: dict, **payload) -> None:
    Path(path).write_text(json.dumps({"meta": meta, **payload}, indent=1) + "\n", encoding="utf-8")


def read_meta(path: str | Path) -> dict | None:
    """Provenance of an artifact, or None if the file carries none."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            doc = json.loads(path.read_text(encoding="utf-8"))
            return doc.get("meta") if isinstance(doc, dict) else None
        if path.suffix == ".csv":
            with open(path, encoding="utf-8") as fh:
                first = fh.readline()
            prefix = f"# {CSV_TAG} "
            return json.loads(first[len(prefix):]) if first.startswith(prefix) else None
    except (OSError, ValueError):
        return None
    return None
