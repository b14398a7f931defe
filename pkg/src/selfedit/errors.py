"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SelfEditError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SelfEditError):
    """A field value violates a domain invariant. ``field`` names the offender."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ParseError(SelfEditError):
    """No JSON object could be extracted from a model response."""


class SchemaError(SelfEditError):
    """Extracted JSON does not match the required structure."""


class JudgeFormatError(SelfEditError):
    """Judge response contained neither a leading yes nor no."""


class TemplateRenderError(SelfEditError):
    """A prompt fixture placeholder could not be filled."""


class DegenerateBaseline(SelfEditError):
    """Normalized gain is undefined: baseline accuracy is 1 and adapted is not."""


class EmptyGroup(SelfEditError):
    """Per-template aggregation received no results."""


class InsufficientEntries(SelfEditError):
    """Archive view requested from an archive with fewer than four entries."""


class BackendUnavailable(SelfEditError):
    """Retryable backend failure (timeouts, 429/503, connection errors)."""


class GenerationError(SelfEditError):
    """Non-retryable generation/answer failure."""


class TrainingError(SelfEditError):
    """Adapter training or SFT failed."""


class TemplateBudgetExhausted(SelfEditError):
    """A template slot failed to produce parseable JSON within the retry budget."""


class EmptyAfterSplit(SelfEditError):
    """A baseline completion contained no non-empty lines."""


class EmptyGrid(SelfEditError):
    """Passage accuracy requested over an empty accuracy grid."""


class EmptyInput(SelfEditError):
    """A statistic was requested over an empty collection."""


class TooFewTemplates(SelfEditError):
    """Intra-iteration similarity needs at least two templates."""


class FormatError(SelfEditError):
    """A dataset file does not follow the expected structure."""


class ConfigError(SelfEditError):
    """Run configuration is unresolvable or inconsistent."""
