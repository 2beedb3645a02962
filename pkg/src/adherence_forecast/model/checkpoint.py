"""Versioned JSON checkpoints.

Layout (keys in this order)::

    {"format": "adherence-forecast-checkpoint", "version": 1,
     "hyperparams": {...}, "scaler": {"mean": [..], "std": [..]} | null,
     "parameters": {name: {"shape": [...], "data": [flat row-major floats]}},
     "meta": {...}}

Parameter names follow ``network.parameter_shapes`` order. Floats are
written with ``repr`` precision, so save/load round-trips bit-exactly.
"""

from __future__ import annotations

import json

import numpy as np

from ..features import Scaler
from .network import HyperParams, ModelParameters, parameter_shapes

FORMAT = "adherence-forecast-checkpoint"
VERSION = 1


def to_json(params: ModelParameters, scaler: Scaler | None = None,
            meta: dict | None = None) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "hyperparams": params.hp.to_dict(),
        "scaler": scaler.to_dict() if scaler is not None else None,
        "parameters": {
            name: {"shape": list(a.shape), "data": a.ravel().tolist()}
            for name, a in params.arrays.items()
        },
        "meta": meta or {},
    }
    return json.dumps(doc)


def from_json(text: str) -> tuple[ModelParameters, Scaler | None, dict]:
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise ValueError("not an adherence-forecast checkpoint")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    hp = HyperParams(**doc["hyperparams"])
    arrays = {}
    for name, shape in parameter_shapes(hp).items():
        entry = doc["parameters"][name]
        if tuple(entry["shape"]) != shape:
            raise ValueError(f"shape mismatch for {name}")
        arrays[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
    scaler = Scaler.from_dict(doc["scaler"]) if doc.get("scaler") else None
    return ModelParameters(hp, arrays), scaler, doc.get("meta", {})


def save(path, params: ModelParameters, scaler: Scaler | None = None,
         meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_json(params, scaler, meta))


def load(path) -> tuple[ModelParameters, Scaler | None, dict]:
    with open(path, encoding="utf-8") as fh:
        return from_json(fh.read())
