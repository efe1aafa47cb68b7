"""Manifest + blob tensor bundles.

One JSON manifest describing named tensors (shape, byte offset, byte length)
next to a binary blob of little-endian float32 values in row-major order.
The manifest records the CRC32 of the whole blob; model and adapter files
share this container and differ only in their metadata block.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from coldserve.errors import CorruptionError, FormatError


def blob_path_for(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def write_bundle(manifest_path, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> int:
    """Write manifest JSON + f32 blob; returns the blob's CRC32."""
    manifest_path = Path(manifest_path)
    records = []
    chunks = []
    offset = 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = data.tobytes()
        records.append(
            {
                "name": name,
                "shape": list(data.shape),
                "offset": offset,
                "length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    manifest = dict(meta)
    manifest["blob"] = blob_path_for(manifest_path).name
    manifest["tensors"] = records
    manifest["crc32"] = crc
    blob_path_for(manifest_path).write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return crc


def read_bundle(manifest_path) -> tuple[dict, dict[str, np.ndarray]]:
    """Load a bundle, verifying CRC32 and per-tensor extents.

    Raises FormatError for a malformed manifest and CorruptionError when the
    blob does not match the manifest's lengths or checksum.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {manifest_path}: {exc}") from exc
    for key in ("blob", "tensors", "crc32"):
        if key not in manifest:
            raise FormatError(f"manifest {manifest_path} missing field {key!r}")

    blob_file = manifest_path.parent / manifest["blob"]
    try:
        blob = blob_file.read_bytes()
    except OSError as exc:
        raise CorruptionError(f"cannot read blob {blob_file}: {exc}") from exc
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    if crc != manifest["crc32"]:
        raise CorruptionError(
            f"blob checksum mismatch: manifest says {manifest['crc32']}, blob is {crc}"
        )

    tensors: dict[str, np.ndarray] = {}
    for rec in manifest["tensors"]:
        try:
            name, shape = rec["name"], tuple(rec["shape"])
            offset, length = int(rec["offset"]), int(rec["length"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed tensor record {rec!r}") from exc
        expected = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if length != expected:
            raise CorruptionError(
                f"tensor {name!r}: recorded length {length} != shape {shape} bytes {expected}"
            )
        if offset < 0 or offset + length > len(blob):
            raise CorruptionError(
                f"tensor {name!r}: extent [{offset}, {offset + length}) outside blob of {len(blob)} bytes"
            )
        flat = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset)
        tensors[name] = np.ascontiguousarray(flat.reshape(shape), dtype=np.float32)
    return manifest, tensors
