"""Directory artifacts: ``manifest.json`` plus raw little-endian blobs.

Every blob is written row-major with its dtype, shape and SHA-256 recorded
in the manifest; hashes are verified when an artifact is read back.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import UserInputError

FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8"}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_artifact(directory, kind: str, meta: dict, arrays: dict) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        fname = f"{name}.{code}"
        (directory / fname).write_bytes(data.tobytes(order="C"))
        blobs[name] = {
            "file": fname,
            "dtype": _DTYPES[code],
            "shape": list(data.shape),
            "sha256": hashlib.sha256(data.tobytes(order="C")).hexdigest(),
        }
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta, "blobs": blobs}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def read_artifact(directory, kind: str | None = None):
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise UserInputError(f"{directory}: no manifest.json")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise UserInputError(
            f"{directory}: unsupported format version {manifest.get('format_version')}"
        )
    if kind is not None and manifest.get("kind") != kind:
        raise UserInputError(f"{directory}: expected a {kind!r} artifact, found {manifest.get('kind')!r}")
    arrays = {}
    for name, blob in manifest["blobs"].items():
        raw = (directory / blob["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != blob["sha256"]:
            raise UserInputError(f"{directory}/{blob['file']}: hash mismatch")
        arr = np.frombuffer(raw, dtype=blob["dtype"]).reshape(blob["shape"])
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="))
    return manifest["meta"], arrays


def artifact_hash(directory) -> str:
    """Digest over the manifest and all blobs of an artifact directory."""
    directory = Path(directory)
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(sha256_file(p).encode())
    return h.hexdigest()
