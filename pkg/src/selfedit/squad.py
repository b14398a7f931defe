"""SQuAD-format dataset ingestion and split selection."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

from .errors import FormatError
from .model import Passage, QAItem

logger = logging.getLogger(__name__)


def ingest_squad(path: Path | str) -> list[Passage]:
    """One Passage per paragraph; the first gold answer text per question.

    Paragraphs without questions are skipped with a warning. Passage ids are
    ``{title}#p{n}`` with a global paragraph counter, unique per file.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("data"), list):
        raise FormatError(f"{path}: $.data must be a list")
    passages: list[Passage] = []
    counter = 0
    for a, article in enumerate(raw["data"]):
        title = article.get("title", "")
        paragraphs = article.get("paragraphs")
        if not isinstance(paragraphs, list):
            raise FormatError(f"{path}: $.data[{a}].paragraphs must be a list")
        for p, paragraph in enumerate(paragraphs):
            context = paragraph.get("context")
            qas = paragraph.get("qas")
            if not isinstance(context, str):
                raise FormatError(f"{path}: $.data[{a}].paragraphs[{p}].context must be a string")
            if not isinstance(qas, list):
                raise FormatError(f"{path}: $.data[{a}].paragraphs[{p}].qas must be a list")
            questions = []
            for q, qa in enumerate(qas):
                question = qa.get("question")
                answers = qa.get("answers")
                if not isinstance(question, str) or not question:
                    raise FormatError(f"{path}: $.data[{a}].paragraphs[{p}].qas[{q}].question must be non-empty")
                if not isinstance(answers, list) or not answers:
                    raise FormatError(f"{path}: $.data[{a}].paragraphs[{p}].qas[{q}].answers must be non-empty")
                gold = answers[0].get("text")
                if not isinstance(gold, str) or not gold:
                    raise FormatError(f"{path}: $.data[{a}].paragraphs[{p}].qas[{q}].answers[0].text must be non-empty")
                questions.append(QAItem(question=question, gold_answer=gold))
            passage_id = f"{title}#p{counter}"
            counter += 1
            if not questions:
                logger.warning("skipping paragraph %s: no questions", passage_id)
                continue
            passages.append(
                Passage(id=passage_id, title=title, body=context, questions=tuple(questions))
            )
    seen: set[str] = set()
    for passage in passages:
        if passage.id in seen:
            raise FormatError(f"{path}: duplicate passage id {passage.id}")
        seen.add(passage.id)
    return passages


def select_passages(
    passages: Sequence[Passage], count: int, ids_file: Path | str | None = None
) -> list[Passage]:
    """The run's subset: an explicit id list when given, else the first
    ``count`` passages in dataset order."""
    if ids_file is not None:
        wanted = [line.strip() for line in Path(ids_file).read_text(encoding="utf-8").splitlines()]
        wanted = [w for w in wanted if w]
        by_id = {p.id: p for p in passages}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise FormatError(f"{ids_file}: unknown passage ids {missing[:5]}")
        return [by_id[w] for w in wanted]
    if len(passages) < count:
        raise FormatError(f"dataset has {len(passages)} usable passages, need {count}")
    return list(passages[:count])
