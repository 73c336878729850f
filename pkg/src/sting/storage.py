"""Run-record persistence.

One canonical-JSON document per run record in a content-addressed directory
(``runs/<sha256 prefix>.json``) plus an ``index.json`` mapping run ids to the
current document, so re-annotated records keep their history.  Writes are
atomic (temp file + rename) and round-trip byte-for-byte at the JSON level.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path


class RunNotFound(KeyError):
    pass


def canonical_json(record: dict) -> bytes:
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode()


class RunStore:
    def __init__(self, root):
        self.root = Path(root)
        self.runs_dir = self.root / "runs"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"

    def _read_index(self) -> dict:
        if not self.index_path.exists():
            return {"runs": {}}
        with open(self.index_path, encoding="utf-8") as handle:
            return json.load(handle)

    def _write_atomic(self, path: Path, data: bytes) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)

    def persist(self, record: dict) -> str:
        """Store (or re-store) a record; returns its content digest."""
        run_id = record["run_id"]
        blob = canonical_json(record)
        digest = hashlib.sha256(blob).hexdigest()[:16]
        self._write_atomic(self.runs_dir / f"{digest}.json", blob)
        index = self._read_index()
        index["runs"][run_id] = {
            "file": f"runs/{digest}.json",
            "digest": digest,
            "created_ns": record.get("created_ns", 0),
            "created_at": record.get("created_at", ""),
            "scenario_id": record.get("scenario", {}).get("scenario_id", ""),
            "status": record.get("status", ""),
        }
        self._write_atomic(self.index_path, json.dumps(index, sort_keys=True, indent=1).encode())
        return digest

    # annotations re-persist the record under a new digest
    update = persist

    def load(self, run_id: str) -> dict:
        index = self._read_index()
        entry = index["runs"].get(run_id)
        if entry is None:
            raise RunNotFound(run_id)
        with open(self.root / entry["file"], "rb") as handle:
            return json.loads(handle.read())

    def list_runs(self) -> list[dict]:
        """Index entries in created order."""
        index = self._read_index()
        entries = [{"run_id": run_id, **meta} for run_id, meta in index["runs"].items()]
        entries.sort(key=lambda e: (e.get("created_at", ""), e.get("created_ns", 0), e["run_id"]))
        return entries
