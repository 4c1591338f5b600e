"""Versioned JSON envelope for fitted models.

Floats are written with Python's shortest round-trip representation, so a
reloaded model reproduces predictions bit for bit.
"""

from __future__ import annotations

import json

from .core import DataError
from .gbt import GbtModel
from .linear import LinearModel
from .stack import CombinedModel, JourneyModel, StackModel

FORMAT = "riskpipe.model"
VERSION = 1

_KINDS = {
    "gbt": GbtModel,
    "logistic": LinearModel,
    "driver-stack": StackModel,
    "journey": JourneyModel,
    "combined": CombinedModel,
}


def model_to_json(model, meta: dict | None = None) -> str:
    body = model.to_dict()
    doc = {"format": FORMAT, "version": VERSION, "kind": body["kind"], "meta": meta or {}, "model": body}
    return json.dumps(doc, sort_keys=True, allow_nan=False, separators=(",", ":")) + "\n"


def model_from_json(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise DataError("not a riskpipe model document")
    if doc.get("version") != VERSION:
        raise DataError(f"unsupported model format version {doc.get('version')!r}")
    kind = doc.get("kind")
    if kind not in _KINDS:
        raise DataError(f"unknown model kind {kind!r}")
    return _KINDS[kind].from_dict(doc["model"])


def save_model(model, path, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(model_to_json(model, meta))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_json(fh.read())
