"""Quantitative analysis: accuracy aggregation with 95% CIs, intra-iteration
template similarity, and synthetic-data length statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from statistics import fmean, pstdev
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import DomainError, EmptyGrid, EmptyInput, TooFewTemplates
from .model import HYPERPARAMETER_KEYS, Hyperparameters, SelfEdit

# Two-sided 95% normal quantile. The CI formula is delta = z * sigma / sqrt(N)
# with the population (divide-by-N) standard deviation.
Z95 = 1.959963984540054

_SCALES = ("log2", "log10", "linear")


@dataclass(frozen=True)
class HpRangeSpec:
    """Fixed normalization domain for one hyperparameter key."""

    key: str
    scale: str
    lower: float
    upper: float

    def __post_init__(self) -> None:
        if self.key not in HYPERPARAMETER_KEYS:
            raise DomainError("key", f"unknown hyperparameter {self.key!r}")
        if self.scale not in _SCALES:
            raise DomainError("scale", f"unknown scale {self.scale!r}")
        if not self.lower < self.upper:
            raise DomainError("lower", f"lower ({self.lower}) must be < upper ({self.upper})")

    def normalized_distance(self, x: float, y: float) -> float:
        if self.scale == "linear":
            return abs(x - y) / (self.upper - self.lower)
        base = 2.0 if self.scale == "log2" else 10.0
        span = abs(math.log(self.upper, base) - math.log(self.lower, base))
        return abs(math.log(x, base) - math.log(y, base)) / span


@dataclass(frozen=True)
class HpRangeTable:
    """Normalization spec for all six hyperparameter keys."""

    specs: tuple[HpRangeSpec, ...]

    def __post_init__(self) -> None:
        keys = tuple(spec.key for spec in self.specs)
        if sorted(keys) != sorted(HYPERPARAMETER_KEYS):
            raise DomainError("specs", "exactly the six hyperparameter keys are required")

    def spec_for(self, key: str) -> HpRangeSpec:
        for spec in self.specs:
            if spec.key == key:
                return spec
        raise DomainError("key", f"no range spec for {key!r}")


# Multiplicative keys are compared in log space (base 2 for the LoRA shape
# parameters, base 10 for the learning rate); the rest compare linearly.
DEFAULT_HP_RANGES = HpRangeTable(
    specs=(
        HpRangeSpec("lora_rank", "log2", 4, 64),
        HpRangeSpec("lora_alpha", "log2", 1, 256),
        HpRangeSpec("lora_dropout", "linear", 0.0, 1.0),
        HpRangeSpec("learning_rate", "log10", 1e-5, 5e-3),
        HpRangeSpec("num_epochs", "linear", 1, 20),
        HpRangeSpec("gradient_accumulation_steps", "linear", 1, 8),
    )
)


@dataclass(frozen=True)
class IterationReport:
    """Per-iteration aggregates; similarity fields are present only when the
    iteration produced at least two templates."""

    mean_accuracy: float
    ci_delta: float
    text_similarity: float | None
    hp_similarity: float | None
    avg_synth_chars: float
    per_passage_accuracy: Mapping[str, float]

    def __post_init__(self) -> None:
        if self.ci_delta < 0.0:
            raise DomainError("ci_delta", f"must be >= 0, got {self.ci_delta}")
        if self.avg_synth_chars < 0.0:
            raise DomainError("avg_synth_chars", f"must be >= 0, got {self.avg_synth_chars}")
        for name in ("text_similarity", "hp_similarity"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise DomainError(name, f"{value} outside [0, 1]")
        object.__setattr__(self, "per_passage_accuracy", dict(self.per_passage_accuracy))

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "mean_accuracy": self.mean_accuracy,
            "ci_delta": self.ci_delta,
            "text_similarity": self.text_similarity,
            "hp_similarity": self.hp_similarity,
            "avg_synth_chars": self.avg_synth_chars,
            "per_passage_accuracy": dict(self.per_passage_accuracy),
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "IterationReport":
        return cls(
            mean_accuracy=data["mean_accuracy"],
            ci_delta=data["ci_delta"],
            text_similarity=data["text_similarity"],
            hp_similarity=data["hp_similarity"],
            avg_synth_chars=data["avg_synth_chars"],
            per_passage_accuracy=dict(data["per_passage_accuracy"]),
        )


def passage_accuracy(values: Sequence[float]) -> float:
    """Mean accuracy over one passage's full template x completion x run grid.

    Failed edits must already be present as zeros; the grid is never sparse.
    """
    if not values:
        raise EmptyGrid("no accuracy values for passage")
    return fmean(values)


def mean_and_ci(xs: Sequence[float]) -> tuple[float, float]:
    """Overall mean and 95% half-width over per-passage accuracies."""
    if not xs:
        raise EmptyInput("no passage accuracies")
    # pstdev computes its own mean with exact arithmetic, so constant input
    # yields sigma == 0.0 exactly; passing a float mu would break that.
    sigma = pstdev(xs) if len(xs) > 1 else 0.0
    delta = Z95 * sigma / math.sqrt(len(xs))
    return fmean(xs), delta


def pairwise_text_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity of two unit-norm vectors mapped onto [0, 1]."""
    cos = sum(x * y for x, y in zip(a, b))
    return min(1.0, max(0.0, (1.0 + cos) / 2.0))


def intra_iteration_text_similarity(
    instructions: Sequence[str], embedder: Callable[[str], Sequence[float]]
) -> float:
    """Mean pairwise text similarity over all unordered instruction pairs."""
    if len(instructions) < 2:
        raise TooFewTemplates(f"need >= 2 instructions, got {len(instructions)}")
    vectors = [embedder(text) for text in instructions]
    sims = [pairwise_text_similarity(a, b) for a, b in combinations(vectors, 2)]
    return fmean(sims)


def pairwise_hp_similarity(
    h1: Hyperparameters, h2: Hyperparameters, ranges: HpRangeTable = DEFAULT_HP_RANGES
) -> float:
    """Mean per-key similarity, each key 1 - clip_[0,1](normalized distance)."""
    total = 0.0
    for key in HYPERPARAMETER_KEYS:
        spec = ranges.spec_for(key)
        distance = spec.normalized_distance(getattr(h1, key), getattr(h2, key))
        total += 1.0 - min(1.0, max(0.0, distance))
    return total / len(HYPERPARAMETER_KEYS)


def intra_iteration_hp_similarity(
    hs: Sequence[Hyperparameters], ranges: HpRangeTable = DEFAULT_HP_RANGES
) -> float:
    """Mean pairwise hyperparameter similarity over all unordered pairs."""
    if len(hs) < 2:
        raise TooFewTemplates(f"need >= 2 hyperparameter sets, got {len(hs)}")
    sims = [pairwise_hp_similarity(a, b, ranges) for a, b in combinations(hs, 2)]
    return fmean(sims)


def avg_synth_chars(edits: Iterable[SelfEdit]) -> float:
    """Mean total character count of the training sequences per self-edit."""
    totals = [edit.data_chars() for edit in edits]
    if not totals:
        raise EmptyInput("no self-edits")
    return fmean(totals)


REPORT_COLUMNS = (
    "iteration",
    "mean_accuracy",
    "ci_delta",
    "text_similarity",
    "hp_similarity",
    "avg_synth_chars",
)


def _format_cell(value: float | None) -> str:
    if value is None:
        return ""
    return f"{value:.6g}"


def emit_report(reports: Sequence[IterationReport], fmt: str, path: Path | str) -> Path:
    """Write one row per iteration as CSV or a markdown table; byte-stable."""
    path = Path(path)
    rows = [
        (
            str(i),
            _format_cell(r.mean_accuracy),
            _format_cell(r.ci_delta),
            _format_cell(r.text_similarity),
            _format_cell(r.hp_similarity),
            _format_cell(r.avg_synth_chars),
        )
        for i, r in enumerate(reports)
    ]
    if fmt == "csv":
        lines = [",".join(REPORT_COLUMNS)] + [",".join(row) for row in rows]
    elif fmt == "markdown":
        lines = [
            "| " + " | ".join(REPORT_COLUMNS) + " |",
            "| " + " | ".join("---" for _ in REPORT_COLUMNS) + " |",
        ] + ["| " + " | ".join(row) + " |" for row in rows]
    else:
        raise DomainError("format", f"unknown report format {fmt!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
