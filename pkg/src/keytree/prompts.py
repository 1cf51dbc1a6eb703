"""Prompt templates for relevance scoring and final QA, plus tolerant response parsing."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

from keytree.errors import DatasetFormatError, ParseFailure
from keytree.tree import RelevanceLevel

LETTERS = "ABCDE"

_INTRO_SCORING = (
    "You are presented with a textual description of a first view video clip, it consists of about "
    "{caption_number} frame captions sparsely sampled from the video (#C means the first person view, and #O "
    "indicates another). The ultimate goal is to answer a question related to this video, choosing the correct "
    "option out of five possible answers."
)
_INTRO_QA = (
    "You are presented with a textual description of a first view video clip, it consists of frame captions "
    "sparsely sampled from the video (#C means the first person view, and #O indicates another). The ultimate "
    "goal is to answer a question related to this video, choosing the correct option out of five possible answers."
)
_GUIDANCE = (
    "It is crucial that you imagine the visual scene as vividly as possible to enhance the accuracy of your "
    "response. After selecting your answer, rate your confidence level in this choice on a scale from 1 to 100, "
    "where 1 indicates low confidence and 100 signifies high confidence. Please provide a concise one-sentence "
    "explanation for your chosen answer. If you are uncertain about the correct option, select the one that seems "
    "closest to being correct."
)
_RELEVANCE_REQUEST = (
    " Meanwhile, could you provide a relevance score for each frame caption to evaluate their relevance with the "
    "query-answering process. The score is between 1,2,3, where 1 indicates low relevance and 3 signifies high "
    "relevance. Please return the relevance score in the format of a list of {caption_number} scores."
)
SCORING_FORMAT = (
    "The prediction, explanation, confidence and frame relevance are (please response in the format of "
    "'prediction:, explanation:, confidence:, frame relevance:')"
)
QA_FORMAT = (
    "The prediction, explanation, and confidence is (please response in the format of "
    "'prediction:, explanation: ,confidence:')"
)


@dataclass(frozen=True)
class QATask:
    uid: str
    video_id: str
    question: str
    options: tuple[str, ...]
    answer: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) != 5:
            raise DatasetFormatError(f"expected exactly 5 options, got {len(self.options)}")
        if self.answer is not None and not (isinstance(self.answer, int) and 0 <= self.answer <= 4):
            raise DatasetFormatError(f"answer must be an integer in 0..4, got {self.answer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "QATask":
        try:
            fields = {k: d[k] for k in ("uid", "video_id", "question", "options")}
        except (KeyError, TypeError) as e:
            raise DatasetFormatError(f"missing field {e}") from None
        if not all(isinstance(fields[k], str) for k in ("uid", "video_id", "question")):
            raise DatasetFormatError("uid, video_id and question must be strings")
        if not isinstance(fields["options"], list) or not all(isinstance(o, str) for o in fields["options"]):
            raise DatasetFormatError("options must be a list of strings")
        answer = d.get("answer")
        if isinstance(answer, bool):
            raise DatasetFormatError(f"answer must be an integer in 0..4, got {answer!r}")
        return cls(**fields, answer=answer)

    def to_dict(self) -> dict:
        d = {"uid": self.uid, "video_id": self.video_id, "question": self.question, "options": list(self.options)}
        if self.answer is not None:
            d["answer"] = self.answer
        return d

    @property
    def answer_letter(self) -> str | None:
        return None if self.answer is None else LETTERS[self.answer]


@dataclass
class AnswerRecord:
    prediction: str
    explanation: str
    confidence: int
    raw_response: str
    relevance: list[RelevanceLevel] | None = None
    warnings: list[str] = field(default_factory=list)
    degraded: bool = False

    def to_dict(self) -> dict:
        return {
            "prediction": self.prediction,
            "explanation": self.explanation,
            "confidence": self.confidence,
            "relevance": None if self.relevance is None else [int(r) for r in self.relevance],
            "raw_response": self.raw_response,
            "warnings": list(self.warnings),
            "degraded": self.degraded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerRecord":
        rel = d.get("relevance")
        return cls(
            d["prediction"],
            d["explanation"],
            int(d["confidence"]),
            d["raw_response"],
            None if rel is None else [RelevanceLevel(r) for r in rel],
            list(d.get("warnings", [])),
            bool(d.get("degraded", False)),
        )


def _options_line(task: QATask) -> str:
    return "Options: " + " ".join(f"{letter}: {opt}." for letter, opt in zip(LETTERS, task.options))


def _render(intro: str, captions: Sequence[str], task: QATask, examples: str | None, closing: str) -> str:
    lines = [intro]
    if examples:
        lines.append(f"Examples: {examples.strip()}")
    lines.append("Description: " + "\n".join(captions))
    lines.append(f"Question: {task.question}")
    lines.append(_options_line(task))
    lines.append(closing)
    return "\n".join(lines)


def _caption_texts(captions) -> list[str]:
    return [c if isinstance(c, str) else c.text for c in captions]


def render_relevance_prompt(captions, task: QATask, examples: str | None = None) -> str:
    """Scoring prompt over captions already in temporal order (strings or Caption objects)."""
    texts = _caption_texts(captions)
    if not texts:
        raise ValueError("relevance prompt needs at least one caption")
    n = len(texts)
    intro = (
        _INTRO_SCORING.format(caption_number=n)
        + "\n"
        + _GUIDANCE
        + _RELEVANCE_REQUEST.format(caption_number=n)
    )
    return _render(intro, texts, task, examples, SCORING_FORMAT)


def render_qa_prompt(captions, task: QATask, examples: str | None = None) -> str:
    texts = _caption_texts(captions)
    if not texts:
        raise ValueError("QA prompt needs at least one caption")
    return _render(_INTRO_QA + "\n" + _GUIDANCE, texts, task, examples, QA_FORMAT)


# -- parsing ------------------------------------------------------------------------------------

_PRED_RE = re.compile(r"prediction\s*[:=]?\s*[\(\[\"'*]*\s*(?:option\s+)?([A-Ea-e])(?![A-Za-z])", re.I)
_FALLBACK_RES = [
    re.compile(r"(?i:answer|option|choice)\s*(?i:is|:)?\s*[\(\[\"'*]*([A-E])(?![A-Za-z])"),
    re.compile(r"\(([A-E])\)"),
    re.compile(r"^\s*([A-E])\s*(?:[\).:,]|$)", re.M),
]
_EXPL_RE = re.compile(r"explanation\s*[:=]\s*(.*?)\s*(?=,?\s*(?:confidence|frame\s+relevance)\s*[:=]|\Z)", re.I | re.S)
_CONF_RE = re.compile(r"confidence\s*[:=]?\s*(-?\d+)", re.I)
_RELEVANCE_RE = re.compile(r"frame\s+relevance\s*[:=]?\s*\[([^\]]*)\]", re.I | re.S)


def _prediction(text: str, fallback: bool) -> str | None:
    m = _PRED_RE.search(text)
    if m:
        return m.group(1).upper()
    if fallback:
        for rx in _FALLBACK_RES:
            m = rx.search(text)
            if m:
                return m.group(1).upper()
    return None


def _common_fields(text: str, warnings: list[str]) -> tuple[str, int]:
    m = _EXPL_RE.search(text)
    explanation = m.group(1).strip() if m else ""
    m = _CONF_RE.search(text)
    if m is None:
        warnings.append("confidence missing; using 1")
        confidence = 1
    else:
        raw = int(m.group(1))
        confidence = min(100, max(1, raw))
        if confidence != raw:
            warnings.append(f"confidence {raw} clamped to {confidence}")
    return explanation, confidence


def parse_relevance_response(text: str, expected_len: int) -> AnswerRecord:
    """Parse a scoring response; the relevance list always comes back with ``expected_len`` entries."""
    if expected_len < 1:
        raise ValueError("expected_len must be >= 1")
    pred = _prediction(text, fallback=False)
    if pred is None:
        raise ParseFailure("no prediction letter in scoring response")
    m = _RELEVANCE_RE.search(text)
    if m is None:
        raise ParseFailure("no frame relevance list in scoring response")
    warnings: list[str] = []
    values = [int(v) for v in re.findall(r"-?\d+", m.group(1))]
    clamped = [min(3, max(1, v)) for v in values]
    if clamped != values:
        warnings.append("relevance values outside 1..3 clamped")
    if len(clamped) < expected_len:
        warnings.append(f"relevance list has {len(clamped)} entries, padded to {expected_len} with 2")
        clamped += [2] * (expected_len - len(clamped))
    elif len(clamped) > expected_len:
        warnings.append(f"relevance list has {len(clamped)} entries, truncated to {expected_len}")
        clamped = clamped[:expected_len]
    explanation, confidence = _common_fields(text, warnings)
    return AnswerRecord(pred, explanation, confidence, text, [RelevanceLevel(v) for v in clamped], warnings)


def parse_qa_response(text: str) -> AnswerRecord:
    pred = _prediction(text, fallback=True)
    if pred is None:
        raise ParseFailure("no option letter found in response")
    warnings: list[str] = []
    explanation, confidence = _common_fields(text, warnings)
    return AnswerRecord(pred, explanation, confidence, text, None, warnings)
