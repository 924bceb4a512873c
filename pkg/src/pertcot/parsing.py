"""Strict extraction of tagged segments from model output.

Tag matching is a small scanner over three fixed tag names, not a markup
parser; it is total (arbitrary bytes yield a flagged result, never an
exception) and position-stable (prepending untagged text changes nothing).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .corpus import Label


class AnswerOption(Enum):
    """The four legal answer strings; UNKNOWN exists only for generation prompts."""

    UP = "upregulated"
    DOWN = "downregulated"
    NOT_DE = "not differentially expressed"
    UNKNOWN = "I do not know"

    def to_label(self) -> Label | None:
        return None if self is AnswerOption.UNKNOWN else Label(self.value)

    @classmethod
    def from_label(cls, label: Label) -> "AnswerOption":
        return cls(label.value)


class Grade(Enum):
    EXCELLENT = "excellent"
    GOOD = "good"
    AVERAGE = "average"
    BAD = "bad"
    TERRIBLE = "terrible"


class Validity(Enum):
    VALID = "valid"
    MISSING_TAGS = "missing_tags"
    UNKNOWN_LABEL = "unknown_label"
    MULTIPLE_ANSWERS = "multiple_answers"


@dataclass(frozen=True)
class ParsedAnswer:
    think_text: str | None
    answer: AnswerOption | None
    validity: Validity

    @property
    def is_valid(self) -> bool:
        return self.validity is Validity.VALID


@dataclass(frozen=True)
class CriticVerdict:
    grade: Grade | None
    justification: str
    validity: Validity

    @property
    def is_valid(self) -> bool:
        return self.validity is Validity.VALID


class BinaryLabel(Enum):
    DE = "differentially expressed"
    NOT_DE = "not differentially expressed"


_ANSWERS_BY_NORMALIZED = {option.value.casefold(): option for option in AnswerOption}
_GRADES_BY_NORMALIZED = {grade.value.casefold(): grade for grade in Grade}


def _normalize(text: str) -> str:
    return " ".join(text.split()).casefold()


def _find_blocks(text: str, tag: str) -> list[str]:
    """All well-formed <tag>...</tag> contents, left to right, non-overlapping."""
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    blocks: list[str] = []
    position = 0
    while True:
        start = text.find(open_tag, position)
        if start < 0:
            break
        end = text.find(close_tag, start + len(open_tag))
        if end < 0:
            break
        blocks.append(text[start + len(open_tag):end])
        position = end + len(close_tag)
    return blocks


def _resolve_blocks(blocks, lookup):
    """Map block texts through lookup; first block wins unless matches disagree."""
    if not blocks:
        return None, Validity.MISSING_TAGS
    matched = [lookup.get(_normalize(block)) for block in blocks]
    if any(m is None for m in matched):
        return None, Validity.UNKNOWN_LABEL
    if len(set(matched)) > 1:
        return None, Validity.MULTIPLE_ANSWERS
    return matched[0], Validity.VALID


def parse_answer(raw_text: str) -> ParsedAnswer:
    """Extract the first think block and the answer choice from raw model output."""
    think_blocks = _find_blocks(raw_text, "think")
    think_text = think_blocks[0].strip() if think_blocks else None
    if think_text == "":
        think_text = None
    answer, validity = _resolve_blocks(_find_blocks(raw_text, "answer"), _ANSWERS_BY_NORMALIZED)
    return ParsedAnswer(think_text=think_text, answer=answer, validity=validity)


def parse_critic(raw_text: str) -> CriticVerdict:
    """Extract the grade and justification; both block orders are accepted."""
    grade, validity = _resolve_blocks(_find_blocks(raw_text, "evaluation"), _GRADES_BY_NORMALIZED)
    reasoning_blocks = _find_blocks(raw_text, "reasoning")
    justification = reasoning_blocks[0].strip() if reasoning_blocks else ""
    return CriticVerdict(grade=grade, justification=justification, validity=validity)


def reduce_to_binary_de(parsed: ParsedAnswer) -> BinaryLabel:
    """Collapse a valid three-class answer to the binary differential-expression view."""
    if not parsed.is_valid or parsed.answer is None:
        raise ValueError(f"cannot reduce an invalid answer (validity={parsed.validity.value})")
    if parsed.answer is AnswerOption.UNKNOWN:
        raise ValueError("cannot reduce an 'I do not know' answer to a binary label")
    if parsed.answer in (AnswerOption.UP, AnswerOption.DOWN):
        return BinaryLabel.DE
    return BinaryLabel.NOT_DE
