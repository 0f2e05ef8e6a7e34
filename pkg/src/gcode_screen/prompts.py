"""Versioned prompt templates and the tagged sections they embed."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template

TEMPLATE_NAMES = (
    "extractor_system",
    "extractor_user",
    "reference_system",
    "reference_user",
    "judge_system",
    "judge_user",
    "baseline_fdm_bench_style",
    "baseline_engineered",
    "baseline_user",
)


def wrap_section(tag: str, body: str, **attrs: str) -> str:
    extra = "".join(f' {k}="{v}"' for k, v in attrs.items())
    return f"<{tag}{extra}>\n{body}\n</{tag}>"


def read_sections(content: str, tag: str) -> list[tuple[dict[str, str], str]]:
    """All ``<tag ...>body</tag>`` sections, in order, with their attributes."""
    pattern = re.compile(rf"<{tag}((?:\s+\w+=\"[^\"]*\")*)>\n(.*?)\n</{tag}>", re.S)
    out = []
    for m in pattern.finditer(content):
        attrs = dict(re.findall(r'(\w+)="([^"]*)"', m.group(1)))
        out.append((attrs, m.group(2)))
    return out


def read_section(content: str, tag: str) -> str | None:
    found = read_sections(content, tag)
    return found[0][1] if found else None


def number_lines(text_lines: list[str]) -> str:
    return "\n".join(f"{i}| {line}" for i, line in enumerate(text_lines))


def unnumber_lines(body: str) -> list[str]:
    out = []
    for row in body.split("\n"):
        _, _, line = row.partition("| ")
        out.append(line)
    return out


@dataclass(frozen=True)
class PromptSet:
    templates: dict[str, str]
    directory: str

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptSet":
        if directory is None:
            root = resources.files("gcode_screen") / "prompts"
            label = "bundled"
        else:
            root = Path(directory)
            label = str(directory)
        templates = {}
        for name in TEMPLATE_NAMES:
            templates[name] = (root / f"{name}.txt").read_text(encoding="utf-8")
        return cls(templates, label)

    def render(self, name: str, **values: str) -> str:
        return Template(self.templates[name]).substitute(values)

    def hashes(self) -> dict[str, str]:
        return {
            name: hashlib.sha256(text.encode("utf-8")).hexdigest()
            for name, text in sorted(self.templates.items())
        }
