"""Single-file checkpoint container.

Layout::

    8 bytes   magic  b"DEXINED\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   manifest length in bytes, uint64 little-endian
    N bytes   UTF-8 JSON manifest
    ...       raw little-endian tensor payloads, in manifest order

The manifest lists ``name``, ``shape``, ``dtype``, ``offset`` (relative to the
start of the payload) and ``nbytes`` for every tensor, echoes the model
config, and carries the training step plus optional extras.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import EncoderGraph, ModelConfig, build_model

MAGIC = b"DEXINED\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    """Not a checkpoint file (bad magic or unreadable manifest)."""


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    """File ends before the payload the manifest promises."""


class IntegrityError(CheckpointError):
    """Manifest entries disagree with each other or with the payload."""


def write_container(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.asarray(arr, order="C")
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({**meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: too short to be a checkpoint")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {VERSION}")
    start = _HEADER.size
    if len(raw) < start + mlen:
        raise TruncatedError(f"{path}: manifest cut short")
    try:
        meta = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from exc
    payload = memoryview(raw)[start + mlen:]
    tensors: dict[str, np.ndarray] = {}
    expected = 0
    for e in meta.get("tensors", []):
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dtype.itemsize != e["nbytes"]:
            raise IntegrityError(f"{e['name']}: shape {e['shape']} x {dtype} != {e['nbytes']} bytes")
        if e["offset"] != expected:
            raise IntegrityError(f"{e['name']}: offset {e['offset']} != expected {expected}")
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise TruncatedError(f"{path}: payload for {e['name']} ends at {end}, file has {len(payload)}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=dtype).reshape(tuple(e["shape"]))
        tensors[e["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
        expected = end
    if expected != len(payload):
        raise IntegrityError(f"{path}: {len(payload) - expected} trailing payload bytes not in manifest")
    return meta, tensors


def save_checkpoint(path, graph: EncoderGraph, optimizer=None, step: int = 0, extra: dict | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in graph.params.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        for name in optimizer.m:
            tensors[f"adam/m/{name}"] = optimizer.m[name]
            tensors[f"adam/v/{name}"] = optimizer.v[name]
        opt_meta = {"step": optimizer.step}
    meta = {"model_config": graph.config.to_dict(), "step": int(step), "optimizer": opt_meta,
            "extra": extra or {}}
    write_container(path, tensors, meta)


def load_checkpoint(path):
    """Returns (graph, optimizer_state or None, step, extra)."""
    from .training import OptimizerState  # circular at import time

    meta, tensors = read_container(path)
    try:
        config = ModelConfig(**meta["model_config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad model config echo ({exc})") from exc
    graph = build_model(config, seed=0)
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        graph.params.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"{path}: parameters do not match the model config ({exc})") from exc
    state = None
    if meta.get("optimizer") is not None:
        m = {k[len("adam/m/"):]: v for k, v in tensors.items() if k.startswith("adam/m/")}
        v = {k[len("adam/v/"):]: v for k, v in tensors.items() if k.startswith("adam/v/")}
        state = OptimizerState(m=m, v=v, step=int(meta["optimizer"]["step"]))
    return graph, state, int(meta.get("step", 0)), meta.get("extra", {})
