"""Single-file binary checkpoint container.

Layout:

    bytes 0..7    magic  b"LMCKPT01"
    bytes 8..15   little-endian u64 header length in bytes
    header        UTF-8 JSON: {"format_version", "meta", "tensors": [...]}
    payload       raw C-order tensor bytes, concatenated

Each header entry records name, dtype string, shape, byte offset into the
payload, and byte count.  Round trips are bit-exact: arrays are written with
``tobytes()`` and restored with ``frombuffer().reshape()``, so saving and
reloading a model reproduces every parameter down to the last bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"LMCKPT01"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable `meta` dict to `path`."""
    path = Path(path)
    index = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": index},
        ensure_ascii=True,
        sort_keys=True,
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back `(tensors, meta)`; raises DataError on any malformed input."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint: {e}", path=str(path)) from e
    if len(raw) < len(MAGIC) + 8:
        raise DataError("file too short to be a checkpoint", path=str(path))
    if raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"bad magic {raw[:8]!r}, expected {MAGIC!r}", path=str(path))
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    hstart = len(MAGIC) + 8
    if hstart + hlen > len(raw):
        raise DataError("header length exceeds file size", path=str(path))
    try:
        header = json.loads(raw[hstart : hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"invalid checkpoint header: {e}", path=str(path)) from e
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported format version {header.get('format_version')}", path=str(path))
    payload = raw[hstart + hlen :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise DataError(f"tensor {entry['name']!r} extends past payload", path=str(path))
        arr = np.frombuffer(payload[lo:hi], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header.get("meta", {})


def save_model(path, model, extra_meta: dict | None = None) -> None:
    """Checkpoint anything exposing `named_parameters()` (and optionally
    `partition_names()` / a dataclass-tree `config`)."""
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    meta = dict(extra_meta or {})
    if hasattr(model, "partition_names"):
        meta["partitions"] = model.partition_names()
    cfg = getattr(model, "config", None)
    if cfg is not None:
        meta["config"] = _config_to_jsonable(cfg)
    save_checkpoint(path, tensors, meta)


def load_model(path, model) -> dict:
    """Restore parameters in place; name sets and shapes must match exactly."""
    tensors, meta = load_checkpoint(path)
    params = model.named_parameters()
    missing = sorted(set(params) - set(tensors))
    unexpected = sorted(set(tensors) - set(params))
    if missing or unexpected:
        raise ConfigError(
            f"checkpoint/model parameter mismatch: missing={missing[:5]} unexpected={unexpected[:5]}"
        )
    for name, p in params.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ConfigError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr  # already a private copy; stored precision is authoritative
        p.grad = None
    return meta


def _hash_arrays(named: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(named):
        arr = named[name]
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("utf-8"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def params_hash(model) -> str:
    """SHA-256 over (name, bytes) pairs in name order; equal iff bit-identical."""
    return _hash_arrays({name: p.data for name, p in model.named_parameters().items()})


def partition_hash(model, partition: str) -> str:
    """Hash of one named parameter partition (e.g. the frozen encoder weights)."""
    names = set(model.partition_names()[partition])
    return _hash_arrays({name: p.data for name, p in model.named_parameters().items() if name in names})


def _config_to_jsonable(cfg):
    from dataclasses import asdict, is_dataclass

    if is_dataclass(cfg):
        return asdict(cfg)
    if isinstance(cfg, dict):
        return cfg
    return repr(cfg)
