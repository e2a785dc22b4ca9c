"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"METALCKP"
    u32       format version (1)
    u64       header length H
    H bytes   UTF-8 JSON header (sorted keys)
    ...       payload: float64 little-endian arrays, back to back, in header order

The header carries the training config, model spec, step counter, generator
state, history, best validation metric, optimizer step and an ``arrays`` list
of ``{"name", "shape"}`` records. Array names are prefixed by group:
``param/``, ``adam_m/``, ``adam_v/`` and ``best/``. Files are written to a
temporary sibling and renamed, so an interrupted save never leaves a partial
checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..metatrain import OptimizerState, TrainConfig, TrainState, init_model
from ..nets import ModelSpec

MAGIC = b"METALCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_F64 = np.dtype("<f8")


def _groups(state: TrainState) -> list[tuple[str, dict[str, np.ndarray]]]:
    opt = state.model.optimizer
    groups = [("param", state.model.arrays()), ("adam_m", opt.m), ("adam_v", opt.v)]
    if state.best_params is not None:
        groups.append(("best", state.best_params))
    return groups


def checkpoint_bytes(state: TrainState) -> bytes:
    records, chunks = [], []
    for group, arrays in _groups(state):
        for name, a in arrays.items():
            a = np.ascontiguousarray(a, dtype=_F64)
            records.append({"name": f"{group}/{name}", "shape": list(a.shape)})
            chunks.append(a.tobytes())
    header = {
        "config": state.cfg.to_dict(),
        "model_spec": state.model.spec.to_dict(),
        "step": state.step,
        "rng_state": state.rng_state,
        "history": state.history,
        "best_metric": state.best_metric,
        "optimizer": {"kind": state.model.optimizer.kind, "step": state.model.optimizer.step},
        "arrays": records,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    os.replace(tmp, path)
    return path


def _parse(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise FormatError("file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    arrays, offset = {}, start
    for rec in header.get("arrays", []):
        shape = tuple(int(s) for s in rec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(blob):
            raise FormatError(f"truncated checkpoint: array {rec['name']!r} is incomplete")
        arrays[rec["name"]] = np.frombuffer(blob, _F64, nbytes // 8, offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"checkpoint has {len(blob) - offset} trailing bytes")
    return header, arrays


def _split(arrays: dict[str, np.ndarray], group: str) -> dict[str, np.ndarray]:
    prefix = group + "/"
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_checkpoint(path) -> TrainState:
    """Read and validate a checkpoint; shapes are checked against the stored config."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    header, arrays = _parse(blob)
    try:
        cfg = TrainConfig.from_dict({**header["config"], "hidden_widths": tuple(header["config"]["hidden_widths"])})
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint config is invalid: {exc}") from None
    if ModelSpec.from_dict(header["model_spec"]) != cfg.model_spec:
        raise FormatError("checkpoint model spec does not match its config")

    template = init_model(cfg)
    expected = {k: v.shape for k, v in template.arrays().items()}
    params = _split(arrays, "param")
    for name, shape in expected.items():
        if name not in params:
            raise FormatError(f"checkpoint is missing array 'param/{name}'")
        if params[name].shape != shape:
            raise FormatError(f"array 'param/{name}' has shape {params[name].shape}, expected {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise FormatError(f"unexpected arrays in checkpoint: {sorted('param/' + e for e in extra)}")
    for group in ("adam_m", "adam_v", "best"):
        for name, a in _split(arrays, group).items():
            if expected.get(name) != a.shape:
                raise FormatError(f"array '{group}/{name}' does not match any parameter shape")

    model = template.with_parameters(params)
    opt = header["optimizer"]
    model.optimizer = OptimizerState(opt["kind"], int(opt["step"]), _split(arrays, "adam_m"), _split(arrays, "adam_v"))
    best = _split(arrays, "best") or None
    return TrainState(model, cfg, int(header["step"]), header["rng_state"], header["history"],
                      header["best_metric"], best)
