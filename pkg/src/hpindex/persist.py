"""JSON persistence with versioned format tags."""

from __future__ import annotations

import json
import os
from pathlib import Path

from .errors import SchemaVersionError

__all__ = ["save_json", "load_json", "load_model"]


def save_json(doc: dict, path) -> None:
    """Write JSON atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_model(path):
    """Load any fitted-model JSON, dispatching on its format tag."""
    from . import armodel, caseshiller, mixedmodel

    doc = load_json(path)
    tag = doc.get("format")
    loaders = {
        armodel.FORMAT: armodel.from_dict,
        mixedmodel.FORMAT: mixedmodel.from_dict,
        caseshiller.FORMAT: caseshiller.from_dict,
    }
    if tag not in loaders:
        raise SchemaVersionError(
            f"{path}: unknown model format {tag!r}; expected one of {sorted(loaders)}"
        )
    return loaders[tag](doc)
