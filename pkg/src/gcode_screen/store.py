"""On-disk layout of runs and their per-sample stage artifacts.

    root/<run_id>/run_meta.json
    root/<run_id>/<sample_id>/{shortened.gcode, extracted.json, reference.json,
                               deviation.json, verdict.json}
"""
from __future__ import annotations

import json
import os
import re
import secrets
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

STAGE_FILES = {
    "shortened": "shortened.gcode",
    "extracted": "extracted.json",
    "reference": "reference.json",
    "deviation": "deviation.json",
    "verdict": "verdict.json",
}

_SAFE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class ArtifactExistsError(FileExistsError):
    pass


def dumps_stable(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def new_run_id() -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    return f"{stamp}-{secrets.token_hex(3)}"


def _check_id(value: str, what: str) -> str:
    if not _SAFE_ID.match(value):
        raise ValueError(f"invalid {what} {value!r}")
    return value


def write_atomic(path: Path, data: bytes, overwrite: bool) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        if overwrite:
            os.replace(tmp, path)
        else:
            try:
                os.link(tmp, path)  # fails if the target exists
            except FileExistsError:
                raise ArtifactExistsError(f"{path} already exists") from None
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class ArtifactStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def run_dir(self, run_id: str) -> Path:
        return self.root / _check_id(run_id, "run id")

    def sample_dir(self, run_id: str, sample_id: str) -> Path:
        return self.run_dir(run_id) / _check_id(sample_id, "sample id")

    def new_run(self, meta: dict | None = None) -> str:
        self.root.mkdir(parents=True, exist_ok=True)
        while True:
            run_id = new_run_id()
            try:
                self.run_dir(run_id).mkdir()
                break
            except FileExistsError:
                continue
        record = dict(meta or {})
        record["run_id"] = run_id
        record["started_at"] = datetime.now(timezone.utc).isoformat()
        write_atomic(self.run_dir(run_id) / "run_meta.json", dumps_stable(record).encode(), False)
        return run_id

    def read_meta(self, run_id: str) -> dict:
        return json.loads((self.run_dir(run_id) / "run_meta.json").read_text(encoding="utf-8"))

    def seal_run(self, run_id: str, summary: dict | None = None) -> None:
        record = self.read_meta(run_id)
        if "finished_at" in record:
            raise ValueError(f"run {run_id} is already sealed")
        record["finished_at"] = datetime.now(timezone.utc).isoformat()
        if summary:
            record["summary"] = summary
        write_atomic(self.run_dir(run_id) / "run_meta.json", dumps_stable(record).encode(), True)

    def persist_artifact(self, run_id: str, sample_id: str, stage: str, payload: Any) -> Path:
        """Write one stage artifact atomically; never replaces an existing file."""
        if stage not in STAGE_FILES:
            raise ValueError(f"unknown stage {stage!r}")
        run_dir = self.run_dir(run_id)
        if not (run_dir / "run_meta.json").exists():
            raise FileNotFoundError(f"run {run_id} was not initialized")
        target = self.sample_dir(run_id, sample_id)
        target.mkdir(exist_ok=True)
        path = target / STAGE_FILES[stage]
        text = payload if isinstance(payload, str) else dumps_stable(payload)
        write_atomic(path, text.encode("utf-8"), overwrite=False)
        return path

    def load_artifact(self, run_id: str, sample_id: str, stage: str) -> Any:
        path = self.sample_dir(run_id, sample_id) / STAGE_FILES[stage]
        text = path.read_text(encoding="utf-8")
        return text if path.suffix == ".gcode" else json.loads(text)

    def artifact_paths(self, run_id: str, sample_id: str) -> dict[str, Path]:
        base = self.sample_dir(run_id, sample_id)
        return {stage: base / name for stage, name in STAGE_FILES.items()}
