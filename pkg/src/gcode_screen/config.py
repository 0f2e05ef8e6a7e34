"""Run configuration loaded from TOML."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ._compat import tomllib
from .gateway import ROLES, BackendDescriptor
from .gcode import ShorteningPolicy
from .reference import BUNDLED_PAIRS, DocBundle, bundled_manual_path, cache_key
from .schema import DEFAULT_CRITICAL, ToleranceSpec, critical_set

STUB_BACKEND = BackendDescriptor(id="stub", kind="stub", model_name="rules-v1")

BASELINE_FAMILIES = ("fdm_bench_style", "engineered")


class ConfigError(ValueError):
    pass


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunConfig:
    backends: dict[str, BackendDescriptor] = field(default_factory=lambda: {"stub": STUB_BACKEND})
    roles: dict[str, str] = field(default_factory=lambda: {r: "stub" for r in ROLES})
    policy: ShorteningPolicy = field(default_factory=ShorteningPolicy)
    tolerance: ToleranceSpec = field(default_factory=ToleranceSpec.default)
    critical: frozenset[str] = DEFAULT_CRITICAL
    concurrency: int = 4
    artifact_root: Path = Path("runs")
    prompt_dir: Path | None = None
    documents: dict[str, list[Path]] = field(default_factory=dict)
    grid_reference: list[str] = field(default_factory=list)
    grid_judge: list[str] = field(default_factory=list)
    extractors: list[str] = field(default_factory=list)
    baseline_family: str = "engineered"

    def __post_init__(self):
        for role, backend_id in self.roles.items():
            if role not in ROLES:
                raise ConfigError(f"unknown role {role!r}")
            if backend_id not in self.backends:
                raise ConfigError(f"role {role} refers to unknown backend {backend_id!r}")
        for role in ROLES:
            self.roles.setdefault(role, "stub")
        self.grid_reference = self.grid_reference or [self.roles["reference"]]
        self.grid_judge = self.grid_judge or [self.roles["judge"]]
        self.extractors = self.extractors or [self.roles["extractor"]]
        for backend_id in self.grid_reference + self.grid_judge + self.extractors:
            if backend_id not in self.backends:
                raise ConfigError(f"unknown backend {backend_id!r}")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.baseline_family not in BASELINE_FAMILIES:
            raise ConfigError(f"unknown baseline family {self.baseline_family!r}")
        if self.prompt_dir is not None and not Path(self.prompt_dir).is_dir():
            raise ConfigError(f"prompt directory {self.prompt_dir} does not exist")
        docs = {cache_key(p, m): [bundled_manual_path(p, m)] for p, m in BUNDLED_PAIRS}
        docs.update(self.documents)
        self.documents = docs
        for key, paths in self.documents.items():
            for path in paths:
                if not Path(path).is_file():
                    raise ConfigError(f"document {path} for {key} does not exist")

    def backend(self, role: str) -> BackendDescriptor:
        return self.backends[self.roles[role]]

    def doc_bundle(self, printer: str, material: str) -> DocBundle:
        paths = self.documents.get(cache_key(printer, material))
        if not paths:
            raise ConfigError(f"no documents configured for {printer}/{material}")
        return DocBundle.from_paths(printer, material, paths)

    def describe(self) -> dict:
        """Everything that influences results, with document contents hashed."""
        return {
            "backends": {k: v.to_json() for k, v in sorted(self.backends.items())},
            "roles": dict(sorted(self.roles.items())),
            "policy": {
                "head_layers": self.policy.head_layers,
                "keep_final_layer": self.policy.keep_final_layer,
                "keep_config": self.policy.keep_config,
                "keep_init": self.policy.keep_init,
            },
            "tolerance": {
                k: [t.relative, t.absolute] for k, t in sorted(self.tolerance.per_key.items())
            },
            "critical": sorted(self.critical),
            "grid": {"reference": self.grid_reference, "judge": self.grid_judge},
            "extractors": self.extractors,
            "baseline_family": self.baseline_family,
            "documents": {
                k: [{"name": Path(p).name, "sha256": _sha256_file(Path(p))} for p in v]
                for k, v in sorted(self.documents.items())
            },
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: Path | None = None) -> "RunConfig":
        base = base or Path.cwd()

        def resolve(p) -> Path:
            path = Path(p)
            return path if path.is_absolute() else base / path

        try:
            backends = {"stub": STUB_BACKEND}
            for backend_id, entry in (data.get("backends") or {}).items():
                backends[backend_id] = BackendDescriptor.from_mapping(backend_id, entry)
            kwargs: dict[str, Any] = {
                "backends": backends,
                "roles": dict(data.get("roles") or {}),
                "policy": ShorteningPolicy(**(data.get("shortening") or {})),
                "concurrency": int(data.get("concurrency", 4)),
                "artifact_root": resolve(data.get("artifact_root", "runs")),
                "baseline_family": data.get("baseline_family", "engineered"),
            }
            if "tolerance_table" in data:
                path = resolve(data["tolerance_table"])
                if not path.is_file():
                    raise ConfigError(f"tolerance table {path} does not exist")
                kwargs["tolerance"] = ToleranceSpec.load(path)
            if "critical" in data:
                kwargs["critical"] = critical_set(data["critical"])
            if "prompt_dir" in data:
                kwargs["prompt_dir"] = resolve(data["prompt_dir"])
            docs = {}
            for pair, paths in (data.get("documents") or {}).items():
                printer, _, material = pair.partition("/")
                docs[cache_key(printer, material)] = [resolve(p) for p in paths]
            kwargs["documents"] = docs
            grid = data.get("grid") or {}
            kwargs["grid_reference"] = list(grid.get("reference", []))
            kwargs["grid_judge"] = list(grid.get("judge", []))
            kwargs["extractors"] = list(grid.get("extractors", []))
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
        return cls.from_mapping(data, base=path.parent)
