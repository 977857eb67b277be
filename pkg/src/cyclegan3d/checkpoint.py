"""Binary checkpoint container.

Layout: b"V3CG", u32 little-endian header length, UTF-8 JSON header, then
raw little-endian arrays back to back in manifest order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"V3CG"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Everything needed to resume: weights, Adam moments, pools, counters.

    ``arrays`` maps slash-separated names (``"G/stem.conv.weight"``,
    ``"opt_G/m/stem.conv.weight"``, ``"pool_Y/3"``) to arrays; ``meta`` holds
    the JSON-serializable remainder (epoch, optimizer step counts, rng state,
    resolved config).
    """

    arrays: dict = field(default_factory=dict)
    epoch: int = 0
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def config_digest(self):
        return config_digest(self.meta.get("config", {}))

    def group(self, prefix):
        """Arrays under ``prefix/`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.arrays.items() if k.startswith(prefix + "/")}


def config_digest(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def array_checksum(arrays):
    """SHA-256 over names, shapes and bytes of a name -> array mapping."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.asarray(arrays[name], order="C")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def save_checkpoint(path, ckpt):
    """Write atomically: temp file in the target directory, then rename."""
    manifest, offset = [], 0
    blobs = []
    for name, arr in ckpt.arrays.items():
        a = np.asarray(arr, order="C")
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt, copy=False).tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "dtype": dt.str,
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": ckpt.version,
        "epoch": int(ckpt.epoch),
        "config_digest": ckpt.config_digest,
        "meta": ckpt.meta,
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(head)))
            f.write(head)
            for raw in blobs:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CorruptHeaderError(f"{path}: not a V3CG checkpoint")
    (n,) = struct.unpack("<I", blob[4:8])
    if 8 + n > len(blob):
        raise TruncatedCheckpointError(f"{path}: header runs past end of file")
    try:
        header = json.loads(blob[8:8 + n].decode("utf-8"))
        version = header["version"]
        manifest = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable header ({exc})") from None
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body = memoryview(blob)[8 + n:]
    arrays = {}
    for entry in manifest:
        start, size = entry["offset"], entry["nbytes"]
        if start + size > len(body):
            raise TruncatedCheckpointError(f"{path}: tensor {entry['name']} is truncated")
        a = np.frombuffer(body[start:start + size], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(a.dtype.newbyteorder("="))
    ckpt = Checkpoint(arrays=arrays, epoch=header["epoch"], meta=header.get("meta", {}), version=version)
    if header.get("config_digest") != ckpt.config_digest:
        raise CorruptHeaderError(f"{path}: config digest does not match the stored config")
    return ckpt
