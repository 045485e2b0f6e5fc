"""Checkpoint directories: a JSON manifest plus a raw named-array archive.

Layout: `<dir>/manifest.json` describes every array (name, dtype, shape,
offset) and carries a sha256 of `<dir>/params.bin`, which is the arrays'
raw little-endian bytes concatenated in manifest order. Loading verifies
version, kind, and digest, and fails loudly on any mismatch.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1

MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def arch_hash(arch: dict) -> str:
    """Short stable digest of a canonicalized architecture description."""
    return hashlib.sha256(_canonical_json(arch).encode()).hexdigest()[:16]


def save_archive(
    out_dir: Path | str,
    kind: str,
    arrays: dict[str, np.ndarray],
    meta: dict,
) -> Path:
    """Write manifest.json + params.bin. Byte-deterministic for equal inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str.lstrip("<>=|"),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    payload = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "params": index,
        "params_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta,
    }
    (out_dir / PARAMS_NAME).write_bytes(payload)
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return out_dir


def load_archive(
    ckpt_dir: Path | str, expected_kind: str | None = None
) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Read back (arrays, meta, manifest); raises CheckpointError on mismatch."""
    ckpt_dir = Path(ckpt_dir)
    mpath = ckpt_dir / MANIFEST_NAME
    ppath = ckpt_dir / PARAMS_NAME
    if not mpath.exists() or not ppath.exists():
        raise CheckpointError(f"checkpoint incomplete at {ckpt_dir}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('format_version')!r}"
        )
    if expected_kind is not None and manifest.get("kind") != expected_kind:
        raise CheckpointError(
            f"expected a {expected_kind!r} checkpoint, found {manifest.get('kind')!r}"
        )
    payload = ppath.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["params_sha256"]:
        raise CheckpointError(f"parameter archive digest mismatch at {ckpt_dir}")
    arrays = {}
    for entry in manifest["params"]:
        start, n = entry["offset"], entry["nbytes"]
        raw = payload[start : start + n]
        if len(raw) != n:
            raise CheckpointError(f"truncated parameter {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, manifest.get("meta", {}), manifest


def archive_digest(ckpt_dir: Path | str) -> str:
    """sha256 over the exact bytes of manifest.json + params.bin."""
    ckpt_dir = Path(ckpt_dir)
    h = hashlib.sha256()
    h.update((ckpt_dir / MANIFEST_NAME).read_bytes())
    h.update((ckpt_dir / PARAMS_NAME).read_bytes())
    return h.hexdigest()
