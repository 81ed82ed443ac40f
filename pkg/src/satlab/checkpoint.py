"""Binary checkpoint files.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON header,
then the raw little-endian payload. The header carries the configs, the step,
the metrics log so far, a manifest of named tensors (shape, dtype, byte offset
and length within the payload) and a SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from satlab.config import ConfigError, TrainConfig, model_from_dict, train_from_dict
from satlab.model import ModelWeights, from_arrays

FORMAT = "satlab-checkpoint"
VERSION = 1
_PREFIX = struct.Struct("<Q")
_HEADER_KEYS = ("model_config", "train_config", "step", "metrics", "tensors",
                "payload_nbytes", "payload_sha256")


class CheckpointIntegrityError(ValueError):
    pass


@dataclass
class OptimizerState:
    """AdamW moment accumulators keyed by parameter name, plus the update count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def check(self, params: dict) -> None:
        if self.step < 0:
            raise ValueError(f"optimizer step {self.step} is negative")
        if set(self.m) != set(params) or set(self.v) != set(params):
            raise ValueError("optimizer moments do not cover exactly the model parameters")
        for k, p in params.items():
            if self.m[k].shape != p.shape or self.v[k].shape != p.shape:
                raise ValueError(f"{k}: moment shape does not match parameter shape {p.shape}")


@dataclass
class Checkpoint:
    weights: ModelWeights
    state: OptimizerState
    step: int
    train_config: Optional[TrainConfig] = None
    metrics: list = field(default_factory=list)


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(weights: ModelWeights, state: OptimizerState, path,
                    train_config: Optional[TrainConfig] = None, metrics: Optional[list] = None) -> Path:
    """Write atomically (temp file plus rename) so an interrupted save never clobbers the old file."""
    params = weights.named_parameters()
    state.check(params)
    tensors = [(f"param/{k}", p.data) for k, p in params.items()]
    tensors += [(f"adam_m/{k}", state.m[k]) for k in params]
    tensors += [(f"adam_v/{k}", state.v[k]) for k in params]

    manifest, chunks, offset = [], [], 0
    for name, arr in tensors:
        raw = _le(arr).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": _le(arr).dtype.str,
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": weights.config.__dict__,
        "train_config": None if train_config is None else train_config.__dict__,
        "step": state.step,
        "metrics": metrics or [],
        "tensors": manifest,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(len(head)))
        f.write(head)
        f.write(payload)
    os.replace(tmp, path)
    return path


def _read_header(blob: bytes, path) -> tuple[dict, memoryview]:
    if len(blob) < _PREFIX.size:
        raise CheckpointIntegrityError(f"{path}: file too short for a header length prefix")
    (n,) = _PREFIX.unpack_from(blob)
    if _PREFIX.size + n > len(blob):
        raise CheckpointIntegrityError(f"{path}: header length {n} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointIntegrityError(f"{path}: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointIntegrityError(f"{path}: unsupported version {header.get('version')}")
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise CheckpointIntegrityError(f"{path}: header lacks {missing}")
    return header, memoryview(blob)[_PREFIX.size + n:]


def read_checkpoint(path) -> Checkpoint:
    """Load and verify a checkpoint; any inconsistency raises CheckpointIntegrityError."""
    blob = Path(path).read_bytes()
    header, payload = _read_header(blob, path)
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointIntegrityError(
            f"{path}: payload is {len(payload)} bytes, header declares {header['payload_nbytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch")

    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != expected or start < 0 or start + nbytes > len(payload):
            raise CheckpointIntegrityError(f"{path}: manifest entry {entry['name']} is inconsistent")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))

    try:
        model_cfg = model_from_dict(header["model_config"])
        train_cfg = None if header["train_config"] is None else train_from_dict(header["train_config"])
    except ConfigError as exc:
        raise CheckpointIntegrityError(f"{path}: stored config is invalid ({exc})") from None

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    try:
        weights = from_arrays(model_cfg, group("param/"))
    except ValueError as exc:
        raise CheckpointIntegrityError(f"{path}: {exc}") from None
    state = OptimizerState(m=group("adam_m/"), v=group("adam_v/"), step=int(header["step"]))
    try:
        state.check(weights.named_parameters())
    except ValueError as exc:
        raise CheckpointIntegrityError(f"{path}: {exc}") from None
    return Checkpoint(weights, state, state.step, train_cfg, header["metrics"])


def load_checkpoint(path) -> tuple[ModelWeights, OptimizerState]:
    ckpt = read_checkpoint(path)
    return ckpt.weights, ckpt.state

