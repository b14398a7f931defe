"""Prompt assembly and model-output parsing.

The four prompt bodies ship as UTF-8 fixture files and are never concatenated
inline in code; builders only interpolate placeholders. The meta/completion/
judge fixtures use ``{name}`` placeholders, the archive section uses
``${name}`` — each fixture keeps its own syntax.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterator, Mapping

from ..errors import DomainError, JudgeFormatError, ParseError, SchemaError, TemplateRenderError
from ..model import (
    HYPERPARAMETER_KEYS,
    ArchiveEntry,
    Hyperparameters,
    Passage,
    Provenance,
    SelfEditTemplate,
)

PROMPT_KINDS = ("template_meta", "completion", "judge")

FIXTURE_NAMES = (
    "template_meta",
    "archive_section",
    "completion",
    "judge",
    "baseline_implications",
    "baseline_rewrite",
)

_RULES_MARKER = "Rules and requirements:"


@dataclass(frozen=True)
class PromptText:
    text: str
    kind: str

    def __post_init__(self) -> None:
        if not self.text:
            raise DomainError("text", "must be non-empty")
        if self.kind not in PROMPT_KINDS:
            raise DomainError("kind", f"unknown prompt kind {self.kind!r}")


@dataclass(frozen=True)
class ArchiveView:
    """Top-2 (descending accuracy) and bottom-2 (ascending accuracy) entries."""

    top: tuple[ArchiveEntry, ArchiveEntry]
    bottom: tuple[ArchiveEntry, ArchiveEntry]

    def __post_init__(self) -> None:
        if len(self.top) != 2 or len(self.bottom) != 2:
            raise DomainError("top", "view requires exactly 2 top and 2 bottom entries")
        if min(e.accuracy for e in self.top) < max(e.accuracy for e in self.bottom):
            raise DomainError("top", "top accuracies must dominate bottom accuracies")


class PromptLibrary:
    """Fixture texts, loaded from package data with optional per-file overrides."""

    def __init__(self, overrides: Mapping[str, Path | str] | None = None):
        self._texts: dict[str, str] = {}
        overrides = dict(overrides or {})
        for name in FIXTURE_NAMES:
            if name in overrides:
                self._texts[name] = Path(overrides.pop(name)).read_text(encoding="utf-8")
            else:
                ref = resources.files(__package__).joinpath(f"fixtures/{name}.txt")
                self._texts[name] = ref.read_text(encoding="utf-8")
        if overrides:
            raise DomainError("fixture_overrides", f"unknown fixture names: {sorted(overrides)}")

    def text(self, name: str) -> str:
        return self._texts[name]

    def checksums(self) -> dict[str, str]:
        return {
            name: hashlib.sha256(text.encode("utf-8")).hexdigest()
            for name, text in self._texts.items()
        }


_DEFAULT_LIBRARY: PromptLibrary | None = None


def default_library() -> PromptLibrary:
    global _DEFAULT_LIBRARY
    if _DEFAULT_LIBRARY is None:
        _DEFAULT_LIBRARY = PromptLibrary()
    return _DEFAULT_LIBRARY


def _fill(template: str, values: Mapping[str, str]) -> str:
    """Replace each placeholder token in a single left-to-right pass.

    Substituted values are never rescanned, so braces or placeholder-looking
    text inside them stay literal. Every token must occur at least once.
    """
    tokens = sorted(values, key=len, reverse=True)
    seen = {token: 0 for token in tokens}
    out: list[str] = []
    i = 0
    while i < len(template):
        pos, hit = len(template), None
        for token in tokens:
            j = template.find(token, i)
            if j != -1 and j < pos:
                pos, hit = j, token
        if hit is None:
            out.append(template[i:])
            break
        out.append(template[i:pos])
        out.append(values[hit])
        seen[hit] += 1
        i = pos + len(hit)
    missing = [token for token, count in seen.items() if count == 0]
    if missing:
        raise TemplateRenderError(f"placeholders not found in fixture: {missing}")
    return "".join(out)


def _entry_payload(entry: ArchiveEntry) -> str:
    return json.dumps(
        {
            "data_creation_instruction": entry.template.data_creation_instruction,
            "hyperparameters": entry.template.hyperparameters.to_json_dict(),
        },
        indent=4,
        ensure_ascii=False,
    )


def build_template_meta_prompt(
    view: ArchiveView | None = None, library: PromptLibrary | None = None
) -> PromptText:
    """The template-creation meta-prompt, optionally carrying the archive view.

    With a view, the archive section is inserted after the hyperparameters
    explanation and before the rules list.
    """
    library = library or default_library()
    meta = library.text("template_meta")
    if view is None:
        return PromptText(text=meta, kind="template_meta")
    section = _fill(
        library.text("archive_section"),
        {
            "${highest_acc_template}": _entry_payload(view.top[0]),
            "${acc1}": repr(view.top[0].accuracy),
            "${ngain1}": repr(view.top[0].normalized_gain),
            "${second_highest_acc_template}": _entry_payload(view.top[1]),
            "${acc2}": repr(view.top[1].accuracy),
            "${ngain2}": repr(view.top[1].normalized_gain),
            "${second_lowest_acc_template}": _entry_payload(view.bottom[1]),
            "${acc3}": repr(view.bottom[1].accuracy),
            "${ngain3}": repr(view.bottom[1].normalized_gain),
            "${lowest_acc_template}": _entry_payload(view.bottom[0]),
            "${acc4}": repr(view.bottom[0].accuracy),
            "${ngain4}": repr(view.bottom[0].normalized_gain),
        },
    )
    try:
        idx = meta.index(_RULES_MARKER)
    except ValueError:
        raise TemplateRenderError("meta fixture lacks the rules marker") from None
    return PromptText(text=meta[:idx] + section + "\n" + meta[idx:], kind="template_meta")


def build_completion_prompt(
    p: Passage, instruction: str, library: PromptLibrary | None = None
) -> PromptText:
    """The template-filling prompt for one passage and one instruction."""
    library = library or default_library()
    text = _fill(
        library.text("completion"),
        {"{title}": p.title, "{passage}": p.body, "{data_creation_instruction}": instruction},
    )
    return PromptText(text=text, kind="completion")


def build_judge_prompt(
    q: str, gold: str, pred: str, library: PromptLibrary | None = None
) -> PromptText:
    library = library or default_library()
    text = _fill(library.text("judge"), {"{question}": q, "{gold}": gold, "{pred}": pred})
    return PromptText(text=text, kind="judge")


def build_baseline_completion_prompt(
    mode: str, p: Passage, library: PromptLibrary | None = None
) -> PromptText:
    """The fixed-template prompt (passage inlined, output split by newlines)."""
    library = library or default_library()
    text = _fill(library.text(_baseline_fixture_name(mode)), {"{passage}": p.body})
    return PromptText(text=text, kind="completion")


def baseline_instruction(mode: str, library: PromptLibrary | None = None) -> str:
    """The fixed template's instruction sentence (the fixture's first line)."""
    library = library or default_library()
    return library.text(_baseline_fixture_name(mode)).splitlines()[0]


def _baseline_fixture_name(mode: str) -> str:
    if mode not in ("baseline_implications", "baseline_rewrite"):
        raise DomainError("mode", f"not a baseline mode: {mode!r}")
    return mode


def _iter_json_objects(raw: str) -> Iterator[str]:
    """Yield each balanced top-level ``{...}`` region, left to right."""
    i = 0
    while True:
        start = raw.find("{", i)
        if start == -1:
            return
        depth = 0
        in_string = False
        escaped = False
        for j in range(start, len(raw)):
            c = raw[j]
            if in_string:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == '"':
                    in_string = False
            elif c == '"':
                in_string = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    yield raw[start : j + 1]
                    i = j + 1
                    break
        else:
            return  # unbalanced tail


def extract_json_object(raw: str) -> dict[str, Any]:
    """First parseable top-level JSON object in a possibly-chatty response."""
    for region in _iter_json_objects(raw):
        try:
            value = json.loads(region)
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return value
    raise ParseError("no JSON object found in response")


def parse_template_json(raw: str, provenance: Provenance) -> SelfEditTemplate:
    """Parse a template-creation response; strict keys, validated values."""
    data = extract_json_object(raw)
    if set(data) != {"data_creation_instruction", "hyperparameters"}:
        raise SchemaError(f"template keys must match exactly, got {sorted(data)}")
    instruction = data["data_creation_instruction"]
    if not isinstance(instruction, str):
        raise SchemaError("data_creation_instruction must be a string")
    hp = data["hyperparameters"]
    if not isinstance(hp, dict) or set(hp) != set(HYPERPARAMETER_KEYS):
        raise SchemaError("hyperparameters keys must match exactly")
    hyperparameters = validate_hyperparameters_dict(hp)
    return SelfEditTemplate(
        data_creation_instruction=instruction,
        hyperparameters=hyperparameters,
        provenance=provenance,
    )


def validate_hyperparameters_dict(data: dict[str, Any]) -> Hyperparameters:
    """Build Hyperparameters from parsed JSON; DomainError names bad fields."""
    return Hyperparameters.from_json_dict(data)


def parse_completion_json(raw: str) -> list[str]:
    """Parse a template-completion response into its training sequences."""
    data = extract_json_object(raw)
    if set(data) != {"training_sequences"}:
        raise SchemaError(f"completion keys must match exactly, got {sorted(data)}")
    sequences = data["training_sequences"]
    if not isinstance(sequences, list) or not sequences:
        raise SchemaError("training_sequences must be a non-empty list")
    for i, item in enumerate(sequences):
        if not isinstance(item, str):
            raise SchemaError(f"training_sequences[{i}] is not a string")
    return list(sequences)


_VERDICT_PUNCTUATION = ".,:;!?\"'()[]{}*"


def parse_judge_verdict(raw: str) -> bool:
    """First token, case-insensitive, must be yes or no."""
    tokens = raw.split()
    if not tokens:
        raise JudgeFormatError("empty judge response")
    first = tokens[0].strip(_VERDICT_PUNCTUATION).lower()
    if first == "yes":
        return True
    if first == "no":
        return False
    raise JudgeFormatError(f"judge response does not start with yes/no: {raw[:80]!r}")
