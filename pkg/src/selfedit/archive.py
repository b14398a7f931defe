"""Append-only archive of evaluated templates.

The archive file is a JSON array whose objects carry exactly the fields
data_creation_instruction, hyperparameters (six keys), accuracy and
normalized_gain; writes are atomic (temp file then rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Iterable, Sequence

from .errors import DegenerateBaseline, DomainError, EmptyGroup, InsufficientEntries
from .model import ArchiveEntry, EvalResult, Provenance, SelfEditTemplate
from .prompts import ArchiveView

# The four seeded entries: the two strongest and two weakest fixed templates,
# with their measured accuracy and normalized gain.
_SEED_HP = {
    "lora_rank": 32,
    "lora_alpha": 64,
    "lora_dropout": 0,
    "learning_rate": 0.001,
    "num_epochs": 10,
    "gradient_accumulation_steps": 1,
}

_SEED_ENTRIES = (
    {
        "data_creation_instruction": "Let's read the following passage and rewrite it in a few different ways, each one separated by a newline.",
        "hyperparameters": _SEED_HP,
        "accuracy": 0.4937,
        "normalized_gain": 0.253575114,
    },
    {
        "data_creation_instruction": "Let's read the following passage and produce a long list of implications derived directly or indirectly from the content.",
        "hyperparameters": _SEED_HP,
        "accuracy": 0.4929,
        "normalized_gain": 0.253715968,
    },
    {
        "data_creation_instruction": "Repeat the passage verbatim.",
        "hyperparameters": _SEED_HP,
        "accuracy": 0.335,
        "normalized_gain": 0.0,
    },
    {
        "data_creation_instruction": "",
        "hyperparameters": _SEED_HP,
        "accuracy": 0.1379,
        "normalized_gain": -0.264447052,
    },
)


@dataclass(frozen=True)
class Archive:
    """Insertion-ordered, append-only store of evaluated templates."""

    entries: tuple[ArchiveEntry, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)


def seed_archive() -> Archive:
    return Archive(
        entries=tuple(ArchiveEntry.from_json_dict(raw) for raw in _SEED_ENTRIES)
    )


def normalized_gain(adapted: float, baseline: float) -> float:
    """Headroom-relative improvement: (adapted - baseline) / (1 - baseline).

    A baseline of 1 leaves no headroom: gain is 0 if adapted is also 1,
    otherwise the quantity is undefined and raises.
    """
    for name, value in (("adapted", adapted), ("baseline", baseline)):
        if not 0.0 <= value <= 1.0:
            raise DomainError(name, f"{value} outside [0, 1]")
    if baseline == 1.0:
        if adapted == 1.0:
            return 0.0
        raise DegenerateBaseline(f"baseline accuracy is 1 but adapted is {adapted}")
    return (adapted - baseline) / (1.0 - baseline)


def aggregate_template_metrics(results: Sequence[EvalResult], t: SelfEditTemplate) -> ArchiveEntry:
    """One archive entry per template: means over every result of that template."""
    if not results:
        raise EmptyGroup("no results for template")
    for r in results:
        if r.self_edit is not None and r.self_edit.template != t:
            raise DomainError("results", "result references a different template")
    accuracy = fmean(r.mean_accuracy for r in results)
    baseline = fmean(r.baseline_accuracy for r in results)
    return ArchiveEntry(template=t, accuracy=accuracy, normalized_gain=normalized_gain(accuracy, baseline))


def archive_view(a: Archive) -> ArchiveView:
    """Top-2/bottom-2 by accuracy; ties resolved by earlier insertion."""
    if len(a.entries) < 4:
        raise InsufficientEntries(f"archive has {len(a.entries)} entries, need 4")
    indexed = list(enumerate(a.entries))
    by_desc = sorted(indexed, key=lambda pair: (-pair[1].accuracy, pair[0]))
    by_asc = sorted(indexed, key=lambda pair: (pair[1].accuracy, pair[0]))
    top = (by_desc[0][1], by_desc[1][1])
    bottom = (by_asc[0][1], by_asc[1][1])
    return ArchiveView(top=top, bottom=bottom)


def update_archive(a: Archive, new_entries: Iterable[ArchiveEntry]) -> Archive:
    return Archive(entries=a.entries + tuple(new_entries))


def archive_to_json(a: Archive) -> str:
    return json.dumps([e.to_json_dict() for e in a.entries], indent=4, ensure_ascii=False)


def archive_from_json(text: str, provenance: Provenance | None = None) -> Archive:
    data = json.loads(text)
    if not isinstance(data, list):
        raise DomainError("archive", "archive file must hold a JSON array")
    kwargs = {} if provenance is None else {"provenance": provenance}
    return Archive(entries=tuple(ArchiveEntry.from_json_dict(item, **kwargs) for item in data))


def save_archive(a: Archive, path: Path | str) -> None:
    """Write atomically: temp file in the destination directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(archive_to_json(a))
            fh.write("\n")
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_archive(path: Path | str) -> Archive:
    return archive_from_json(Path(path).read_text(encoding="utf-8"))
