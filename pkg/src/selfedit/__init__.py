"""Self-edit template search: an LLM proposes data-creation templates with
fine-tuning hyperparameters, fills them per passage, each (data, settings)
pair is applied to a cloned model and scored, an archive of best/worst
templates steers future proposals, and the winners are distilled back into
the proposer."""

from .archive import (
    Archive,
    aggregate_template_metrics,
    archive_view,
    normalized_gain,
    seed_archive,
    update_archive,
)
from .backends import (
    BASELINE_DECODING,
    EXPLOIT_DECODING,
    EXPLORE_DECODING,
    BackendSuite,
    DecodingParams,
    EmbeddingVector,
    ModelHandle,
)
from .metrics import (
    DEFAULT_HP_RANGES,
    HpRangeSpec,
    HpRangeTable,
    IterationReport,
    avg_synth_chars,
    intra_iteration_hp_similarity,
    intra_iteration_text_similarity,
    mean_and_ci,
    pairwise_hp_similarity,
    pairwise_text_similarity,
    passage_accuracy,
)
from .model import (
    ArchiveEntry,
    EvalResult,
    Hyperparameters,
    Passage,
    Provenance,
    QAItem,
    RunConfig,
    SelfEdit,
    SelfEditTemplate,
    SftExample,
    validate_hyperparameters,
)
from .pipeline import (
    IterationResults,
    IterationState,
    apply_and_evaluate,
    build_sft_dataset,
    complete_templates,
    create_self_edit_templates,
    evaluate_baseline_accuracy,
    run_training_iteration,
    run_validation,
    split_baseline_completion,
    train_model,
)
from .prompts import (
    ArchiveView,
    PromptText,
    build_completion_prompt,
    build_judge_prompt,
    build_template_meta_prompt,
    parse_completion_json,
    parse_judge_verdict,
    parse_template_json,
)

__version__ = "0.1.0"

__all__ = [
    "Archive",
    "ArchiveEntry",
    "ArchiveView",
    "BackendSuite",
    "BASELINE_DECODING",
    "DecodingParams",
    "DEFAULT_HP_RANGES",
    "EmbeddingVector",
    "EvalResult",
    "EXPLOIT_DECODING",
    "EXPLORE_DECODING",
    "HpRangeSpec",
    "HpRangeTable",
    "Hyperparameters",
    "IterationReport",
    "IterationResults",
    "IterationState",
    "ModelHandle",
    "Passage",
    "PromptText",
    "Provenance",
    "QAItem",
    "RunConfig",
    "SelfEdit",
    "SelfEditTemplate",
    "SftExample",
    "aggregate_template_metrics",
    "apply_and_evaluate",
    "archive_view",
    "avg_synth_chars",
    "build_completion_prompt",
    "build_judge_prompt",
    "build_sft_dataset",
    "build_template_meta_prompt",
    "complete_templates",
    "create_self_edit_templates",
    "evaluate_baseline_accuracy",
    "intra_iteration_hp_similarity",
    "intra_iteration_text_similarity",
    "mean_and_ci",
    "normalized_gain",
    "pairwise_hp_similarity",
    "pairwise_text_similarity",
    "parse_completion_json",
    "parse_judge_verdict",
    "parse_template_json",
    "passage_accuracy",
    "run_training_iteration",
    "run_validation",
    "seed_archive",
    "split_baseline_completion",
    "train_model",
    "update_archive",
    "validate_hyperparameters",
]
