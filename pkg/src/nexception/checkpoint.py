"""Single-file weight container.

Layout: 4-byte magic, little-endian uint32 manifest length, UTF-8 JSON
manifest, then a raw blob of little-endian float32 parameter data. The
manifest records the builder inputs (variant, classes, input size, config)
and a table of name/shape/offset/length rows, so a file can be loaded
without the model that wrote it. Only float32 weights are accepted; the
round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .models import ArchConfig, ModelGraph, build_variant

MAGIC = b"NXCK"
FORMAT_VERSION = 1


def save_checkpoint(path: str, model: ModelGraph, extra: dict | None = None) -> None:
    """Write every registered parameter (running statistics included)."""
    table = []
    chunks = []
    offset = 0
    for name, p in model.registry.items():
        arr = p.data
        if arr.dtype != np.float32:
            raise FormatError(f"parameter '{name}' is {arr.dtype}; the container "
                              "stores float32 only")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    cfg = model.arch_config
    manifest = {
        "format_version": FORMAT_VERSION,
        "variant": model.name,
        "num_classes": model.num_classes,
        "input_hw": list(model.input_hw),
        "arch_config": cfg.to_dict() if model.name == "reduced_nas" and cfg else None,
        "extra": extra or {},
        "params": table,
    }
    payload = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for raw in chunks:
            f.write(raw)


def read_manifest(path: str) -> dict:
    """Header only; cheap enough for listings."""
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise FormatError(f"{path}: not a weight container (bad magic)")
        (n,) = struct.unpack("<I", head[4:])
        payload = f.read(n)
    if len(payload) < n:
        raise FormatError(f"{path}: truncated manifest")
    manifest = json.loads(payload.decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: container version "
                          f"{manifest.get('format_version')} != {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path: str) -> tuple[ModelGraph, dict]:
    """Rebuild the model named in the manifest and restore every weight.

    The manifest's parameter table must match the rebuilt registry exactly;
    missing, unexpected, or reshaped entries are format errors.
    """
    manifest = read_manifest(path)
    with open(path, "rb") as f:
        f.seek(4)
        (n,) = struct.unpack("<I", f.read(4))
        f.seek(8 + n)
        blob = f.read()

    cfg = manifest.get("arch_config")
    model = build_variant(
        manifest["variant"],
        num_classes=manifest["num_classes"],
        config=ArchConfig.from_dict(cfg) if cfg else None,
        input_hw=tuple(manifest["input_hw"]),
    )
    table = {row["name"]: row for row in manifest["params"]}
    missing = set(model.registry) - set(table)
    unexpected = set(table) - set(model.registry)
    if missing or unexpected:
        raise FormatError(f"{path}: parameter table mismatch "
                          f"(missing {sorted(missing)[:3]}, "
                          f"unexpected {sorted(unexpected)[:3]})")
    end = max((r["offset"] + r["length"] for r in table.values()), default=0)
    if len(blob) < end:
        raise FormatError(f"{path}: blob truncated ({len(blob)} bytes, "
                          f"need {end})")
    for name, row in table.items():
        p = model.registry[name]
        arr = np.frombuffer(blob, dtype="<f4", count=row["length"] // 4,
                            offset=row["offset"]).reshape(row["shape"])
        if tuple(arr.shape) != tuple(p.data.shape):
            raise FormatError(f"{path}: '{name}' has shape {arr.shape}, "
                              f"model expects {tuple(p.data.shape)}")
        p.data = arr.astype(np.float32)  # astype copies out of the read-only buffer
    return model, manifest
