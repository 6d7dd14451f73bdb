"""Versioned little-endian binary container for weights and trace caches.

Layout: magic (4 bytes), version (u32 LE), header length (u32 LE), header
JSON (utf-8; carries arbitrary metadata plus the tensor manifest of
(name, shape) in payload order), then the concatenated float32 LE payload.
Reload is bit-exact, which the regression tests rely on.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from ..errors import DataError
from .unet import Backbone, BackboneConfig

WEIGHTS_MAGIC = b"EVGW"
FORMAT_VERSION = 1


def write_blob(path, magic: bytes, meta: dict, arrays: "OrderedDict[str, np.ndarray]") -> None:
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    header = dict(meta)
    header["tensors"] = manifest
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_blob(path, magic: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for entry in header.pop("tensors"):
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise DataError(f"{path}: truncated payload at tensor {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return header, arrays


def save_weights(backbone: Backbone, path) -> None:
    arrays = OrderedDict(
        (name, tensor.detach().to(torch.float32).numpy())
        for name, tensor in backbone.state_dict().items()
    )
    meta = {"kind": "backbone-weights", "config": asdict(backbone.config)}
    write_blob(path, WEIGHTS_MAGIC, meta, arrays)


def load_weights(path) -> Backbone:
    header, arrays = read_blob(path, WEIGHTS_MAGIC)
    raw = header.get("config")
    if raw is None:
        raise DataError(f"{path}: missing backbone config in header")
    raw = dict(raw)
    raw["channels"] = tuple(raw["channels"])
    backbone = Backbone(BackboneConfig(**raw))
    state = OrderedDict((k, torch.from_numpy(v)) for k, v in arrays.items())
    backbone.load_state_dict(state)
    return backbone
