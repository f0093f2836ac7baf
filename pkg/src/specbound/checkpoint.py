"""Versioned JSON checkpoints.

Tensors are stored as base64 of their little-endian float64 bytes in
row-major order, alongside their shapes. Keys are sorted so that saving the
same model twice yields byte-identical files.
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .model import FFN_EXPANSION, HEAD_MODES, ToyModel, ToyModelSpec

FORMAT = "specbound-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


def _encode(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(name: str, record: dict) -> np.ndarray:
    try:
        shape = tuple(int(n) for n in record["shape"])
        raw = base64.b64decode(record["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"tensor {name!r} is malformed: {exc}") from None
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"tensor {name!r}: {len(raw)} bytes do not match shape {shape}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def expected_shapes(spec: ToyModelSpec) -> dict[str, tuple[int, ...]]:
    L, D, V = spec.num_layers, spec.hidden_dim, spec.vocab_size
    H = FFN_EXPANSION * D
    return {
        "embed": (V, D), "g_attn": (L, D), "wq": (L, D, D), "wk": (L, D, D), "wv": (L, D, D),
        "wo": (L, D, D), "g_ffn": (L, D), "w1": (L, D, H), "w2": (L, H, D), "lm_head": (D, V),
        "exit_heads": (L - 1, D, V),
    }


def dumps(model: ToyModel) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "spec": asdict(model.spec),
        "head_mode": model.head_mode,
        "tensors": {name: _encode(t) for name, t in model.tensors().items()},
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads(text: str) -> ToyModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}; expected {VERSION}")
    known = {f.name for f in fields(ToyModelSpec)}
    raw_spec = doc.get("spec")
    if not isinstance(raw_spec, dict) or set(raw_spec) - known:
        raise CheckpointError("spec section is missing or has unknown fields")
    spec = ToyModelSpec(**raw_spec)
    try:
        spec.validate()
    except ValueError as exc:
        raise CheckpointError(f"invalid spec: {exc}") from None
    head_mode = doc.get("head_mode", "trained")
    if head_mode not in HEAD_MODES:
        raise CheckpointError(f"unknown head mode {head_mode!r}")
    tensors = doc.get("tensors")
    if not isinstance(tensors, dict):
        raise CheckpointError("tensors section is missing")
    arrays = {}
    for name, shape in expected_shapes(spec).items():
        if name not in tensors:
            raise CheckpointError(f"tensor {name!r} is missing")
        arr = _decode(name, tensors[name])
        if arr.shape != shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        arrays[name] = arr
    return ToyModel(spec=spec, head_mode=head_mode, **arrays)


def save(model: ToyModel, path) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    text = dumps(model)
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load(path) -> ToyModel:
    return loads(Path(path).read_text(encoding="utf-8"))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
