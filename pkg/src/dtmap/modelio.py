"""JSON model files shared by the command line tools.

Layout::

    {"format_version": 1, "model": "lmm" | "fpca" | "dtm", "params": {...}, "meta": {...}}

Matrices are stored row-major as flat lists; the DTM's ``S`` is stored through
its Cholesky factor.
"""
from __future__ import annotations

import json
from pathlib import Path

from .dtm import DtmState
from .fpca import FpcaModel
from .lmm import LmmModel

FORMAT_VERSION = 1

_TAGS = {LmmModel: "lmm", FpcaModel: "fpca", DtmState: "dtm"}
_TYPES = {v: k for k, v in _TAGS.items()}


class ModelFileError(ValueError):
    pass


def model_tag(model) -> str:
    try:
        return _TAGS[type(model)]
    except KeyError:
        raise TypeError(f"not a serializable model: {type(model).__name__}") from None


def model_to_json(model, meta: dict | None = None) -> dict:
    return {"format_version": FORMAT_VERSION, "model": model_tag(model),
            "params": model.to_dict(), "meta": dict(meta or {})}


def model_from_json(obj: dict):
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model format_version {version!r}")
    tag = obj.get("model")
    if tag not in _TYPES:
        raise ModelFileError(f"unknown model kind {tag!r}")
    try:
        return _TYPES[tag].from_dict(obj["params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed {tag} model: {exc}") from exc


def save_model(model, path, meta: dict | None = None) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(model_to_json(model, meta), fh)


def load_model(path):
    try:
        with Path(path).open(encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: not valid JSON ({exc.msg})") from exc
    return model_from_json(obj)
