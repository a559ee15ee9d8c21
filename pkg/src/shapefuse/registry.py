"""On-disk model registry.

Layout::

    <root>/index.json          {"format_version": 1, "entries": {id: entry}}
    <root>/<id>/manifest.json  artifact manifest
    <root>/<id>/*.f8|*.i8      blobs

Each entry records the artifact kind, manifest path, blob paths and a
content hash over the artifact directory, which is verified on load.
"""
from __future__ import annotations

import json
import re
import shutil
from pathlib import Path

from .errors import UserInputError
from .kernel import UniversalCovariance
from .pdm import ShapeModel
from .regression import RegressionMap
from .store import FORMAT_VERSION, artifact_hash

KINDS = {"pdm": ShapeModel, "covariance": UniversalCovariance, "regression-map": RegressionMap}
_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


class ModelRegistry:
    def __init__(self, root):
        self.root = Path(root)
        self.index_path = self.root / "index.json"

    def _read_index(self) -> dict:
        if not self.index_path.exists():
            return {"format_version": FORMAT_VERSION, "entries": {}}
        with open(self.index_path) as fh:
            index = json.load(fh)
        if index.get("format_version") != FORMAT_VERSION:
            raise UserInputError(f"{self.index_path}: unsupported registry format")
        return index

    def _write_index(self, index: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.index_path, "w") as fh:
            json.dump(index, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @property
    def entries(self) -> dict:
        return self._read_index()["entries"]

    def kind_of(self, model_id: str) -> str:
        entry = self.entries.get(model_id)
        if entry is None:
            raise UserInputError(f"model {model_id!r} is not in the registry at {self.root}")
        return entry["kind"]

    def put(self, model_id: str, obj) -> dict:
        """Store ``obj`` (a model, covariance or regression map) under ``model_id``."""
        if not _ID.match(model_id):
            raise UserInputError(f"invalid model id {model_id!r}")
        kind = next((k for k, cls in KINDS.items() if isinstance(obj, cls)), None)
        if kind is None:
            raise UserInputError(f"cannot store objects of type {type(obj).__name__}")
        directory = self.root / model_id
        if directory.exists():
            shutil.rmtree(directory)
        manifest = obj.save(directory)
        entry = {
            "kind": kind,
            "manifest": f"{model_id}/manifest.json",
            "blobs": sorted(f"{model_id}/{b['file']}" for b in manifest["blobs"].values()),
            "sha256": artifact_hash(directory),
        }
        index = self._read_index()
        index["entries"][model_id] = entry
        self._write_index(index)
        return entry

    def get(self, model_id: str, kind: str | None = None):
        entry = self.entries.get(model_id)
        if entry is None:
            raise UserInputError(f"model {model_id!r} is not in the registry at {self.root}")
        if kind is not None and entry["kind"] != kind:
            raise UserInputError(f"model {model_id!r} is a {entry['kind']}, expected {kind}")
        directory = self.root / model_id
        if artifact_hash(directory) != entry["sha256"]:
            raise UserInputError(f"model {model_id!r}: content hash does not match the registry index")
        return KINDS[entry["kind"]].load(directory)

    def hash_of(self, model_id: str) -> str:
        return self.entries[model_id]["sha256"]
