"""Synthetic reasoning-trace factory: generation, critic filtering, export.

Two generation strategies produce :class:`ReasoningTrace` objects:

* predict-and-explain: the generator sees no outcome and a trace is kept
  only when its answer matches the ground truth;
* explain-from-outcome: the generator is handed the outcome, a critic
  grades the explanation, and only excellent-graded traces whose answer
  echoes the given solution are kept.

Retained traces export to a fine-tuning corpus whose targets are
guaranteed to parse back to their labels.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .corpus import Corpus, Label, PerturbationRecord
from .errors import CorpusError
from .gateway import (
    ChatRequest,
    ChatResult,
    DECISION_TEMPERATURE,
    GENERATION_TEMPERATURE,
    Gateway,
)
from .io import sha256_hex, write_jsonl
from .parsing import AnswerOption, Grade, Validity, parse_answer, parse_critic
from .prompts import render_critic, render_generator, render_standard


class Approach(Enum):
    PREDICT_EXPLAIN = "predict_explain"
    EXPLAIN_FROM_OUTCOME = "explain_from_outcome"


@dataclass(frozen=True)
class ReasoningTrace:
    record: PerturbationRecord
    think_text: str | None
    answer: AnswerOption | None
    approach: Approach
    critic_grade: Grade | None
    retained: bool
    generator_model: str
    critic_model: str | None
    answer_validity: Validity
    critic_validity: Validity | None = None
    generator_raw: str = ""
    critic_raw: str | None = None
    generator_error: str | None = None
    critic_error: str | None = None
    factuality_score: float | None = None

    @property
    def trace_id(self) -> str:
        raw = "|".join((*self.record.key, self.approach.value, self.generator_model))
        return sha256_hex(raw)[:16]

    def to_row(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "cell_line": self.record.cell_line,
            "perturbation": self.record.perturbation_gene,
            "gene": self.record.target_gene,
            "label": self.record.label.serialized,
            "approach": self.approach.value,
            "generator_model": self.generator_model,
            "critic_model": self.critic_model,
            "think": self.think_text,
            "answer": self.answer.value if self.answer else None,
            "answer_validity": self.answer_validity.value,
            "critic_grade": self.critic_grade.value if self.critic_grade else None,
            "critic_validity": self.critic_validity.value if self.critic_validity else None,
            "retained": self.retained,
            "generator_raw": self.generator_raw,
            "critic_raw": self.critic_raw,
            "generator_error": self.generator_error,
            "critic_error": self.critic_error,
            "factuality_score": self.factuality_score,
        }

    @classmethod
    def from_row(cls, row: dict) -> "ReasoningTrace":
        record = PerturbationRecord(
            cell_line=row["cell_line"],
            perturbation_gene=row["perturbation"],
            target_gene=row["gene"],
            label=Label(row["label"]),
        )
        return cls(
            record=record,
            think_text=row.get("think"),
            answer=AnswerOption(row["answer"]) if row.get("answer") else None,
            approach=Approach(row["approach"]),
            critic_grade=Grade(row["critic_grade"]) if row.get("critic_grade") else None,
            retained=bool(row["retained"]),
            generator_model=row["generator_model"],
            critic_model=row.get("critic_model"),
            answer_validity=Validity(row["answer_validity"]),
            critic_validity=Validity(row["critic_validity"]) if row.get("critic_validity") else None,
            generator_raw=row.get("generator_raw", ""),
            critic_raw=row.get("critic_raw"),
            generator_error=row.get("generator_error"),
            critic_error=row.get("critic_error"),
            factuality_score=row.get("factuality_score"),
        )


@dataclass(frozen=True)
class SftExample:
    system_text: str
    user_text: str
    target_text: str
    source_trace_id: str
    label: Label

    def to_row(self) -> dict:
        return {
            "system": self.system_text,
            "user": self.user_text,
            "target": self.target_text,
            "label": self.label.serialized,
            "trace_id": self.source_trace_id,
        }


def _answer_matches(answer: AnswerOption | None, label: Label) -> bool:
    return answer is not None and answer.to_label() is label


def _complete_with_resample(
    records: Corpus,
    gateway: Gateway,
    make_request,
    resample_unparseable: int,
    on_progress,
) -> tuple[list[ChatResult], list]:
    """One generator call per record, retrying unparseable outputs.

    Retries carry a distinct seed hint so they miss the first attempt's
    cache entry; the last attempt wins either way. Off by default: the
    retention rate should come from filtering, not resampling to success.
    """
    results = gateway.complete_batch(
        [make_request(record, None) for record in records], on_progress=on_progress)
    parsed = [parse_answer(result.raw_text) for result in results]
    for attempt in range(1, resample_unparseable + 1):
        retry = [i for i, p in enumerate(parsed) if results[i].ok and not p.is_valid]
        if not retry:
            break
        retry_results = gateway.complete_batch(
            [make_request(records[i], attempt) for i in retry], on_progress=on_progress)
        for i, result in zip(retry, retry_results):
            results[i] = result
            parsed[i] = parse_answer(result.raw_text)
    return results, parsed


def generate_approach1(
    records: Corpus,
    gateway: Gateway,
    generator_model: str,
    temperature: float = GENERATION_TEMPERATURE,
    max_output_tokens: int = 2048,
    resample_unparseable: int = 0,
    on_progress=None,
) -> list[ReasoningTrace]:
    """Predict-and-explain over the standard prompt; keep correct, reasoned answers."""

    def make_request(record, seed_hint):
        bundle = render_standard(record)
        return ChatRequest(
            model_name=generator_model,
            system_text=bundle.system_text,
            user_text=bundle.user_text,
            temperature=temperature,
            max_output_tokens=max_output_tokens,
            seed_hint=seed_hint,
        )

    results, parsed_all = _complete_with_resample(
        records, gateway, make_request, resample_unparseable, on_progress)

    traces: list[ReasoningTrace] = []
    for record, result, parsed in zip(records, results, parsed_all):
        retained = (
            result.ok
            and parsed.is_valid
            and parsed.think_text is not None
            and _answer_matches(parsed.answer, record.label)
        )
        traces.append(ReasoningTrace(
            record=record,
            think_text=parsed.think_text,
            answer=parsed.answer,
            approach=Approach.PREDICT_EXPLAIN,
            critic_grade=None,
            retained=retained,
            generator_model=generator_model,
            critic_model=None,
            answer_validity=parsed.validity,
            generator_raw=result.raw_text,
            generator_error=result.error,
        ))
    return traces


def generate_approach2(
    records: Corpus,
    gateway: Gateway,
    generator_model: str,
    critic_model: str,
    temperature: float = GENERATION_TEMPERATURE,
    max_output_tokens: int = 2048,
    resample_unparseable: int = 0,
    on_progress=None,
) -> list[ReasoningTrace]:
    """Explain-from-outcome with critic filtering.

    The critic sees the ORIGINAL standard user query (not the generator
    system prompt) and the generated think block. It is only consulted for
    traces whose answer echoes the given solution; everything else is
    already unretainable.
    """

    def make_request(record, seed_hint):
        bundle = render_generator(record)
        return ChatRequest(
            model_name=generator_model,
            system_text=bundle.system_text,
            user_text=bundle.user_text,
            temperature=temperature,
            max_output_tokens=max_output_tokens,
            seed_hint=seed_hint,
        )

    gen_results, parsed_all = _complete_with_resample(
        records, gateway, make_request, resample_unparseable, on_progress)

    needs_critic: list[int] = []
    critic_requests: list[ChatRequest] = []
    for index, (record, result, parsed) in enumerate(zip(records, gen_results, parsed_all)):
        if (
            result.ok
            and parsed.is_valid
            and parsed.think_text is not None
            and _answer_matches(parsed.answer, record.label)
        ):
            user_query = render_standard(record).user_text
            bundle = render_critic(user_query, parsed.think_text)
            critic_requests.append(ChatRequest(
                model_name=critic_model,
                system_text=bundle.system_text,
                user_text=bundle.user_text,
                temperature=DECISION_TEMPERATURE,
                max_output_tokens=max_output_tokens,
            ))
            needs_critic.append(index)
    critic_results = gateway.complete_batch(critic_requests, on_progress=on_progress)
    critic_by_index: dict[int, ChatResult] = dict(zip(needs_critic, critic_results))

    traces: list[ReasoningTrace] = []
    for index, (record, result, parsed) in enumerate(zip(records, gen_results, parsed_all)):
        critic_result = critic_by_index.get(index)
        critic_grade = None
        critic_validity = None
        critic_raw = None
        critic_error = None
        if critic_result is not None:
            verdict = parse_critic(critic_result.raw_text)
            critic_grade = verdict.grade
            critic_validity = verdict.validity
            critic_raw = critic_result.raw_text
            critic_error = critic_result.error
        retained = critic_result is not None and critic_result.ok and critic_grade is Grade.EXCELLENT
        traces.append(ReasoningTrace(
            record=record,
            think_text=parsed.think_text,
            answer=parsed.answer,
            approach=Approach.EXPLAIN_FROM_OUTCOME,
            critic_grade=critic_grade,
            retained=retained,
            generator_model=generator_model,
            critic_model=critic_model,
            answer_validity=parsed.validity,
            critic_validity=critic_validity,
            generator_raw=result.raw_text,
            critic_raw=critic_raw,
            generator_error=result.error,
            critic_error=critic_error,
        ))
    return traces


def build_sft_examples(traces: list[ReasoningTrace], only_retained: bool = True) -> list[SftExample]:
    """SFT examples in trace order; targets are think + answer under standard prompts."""
    examples: list[SftExample] = []
    for trace in traces:
        if only_retained and not trace.retained:
            continue
        if trace.answer is None or trace.answer is AnswerOption.UNKNOWN:
            if trace.retained:
                raise CorpusError(
                    f"trace {trace.trace_id} is retained but has no usable answer "
                    "(retention invariant breach)"
                )
            continue
        if trace.think_text is None:
            if trace.retained:
                raise CorpusError(f"trace {trace.trace_id} is retained but has no think block")
            continue
        label = trace.answer.to_label()
        assert label is not None
        target = f"<think>{trace.think_text}</think><answer>{label.serialized}</answer>"
        reparsed = parse_answer(target)
        if not (reparsed.is_valid and reparsed.think_text and reparsed.answer.to_label() is label):
            raise CorpusError(
                f"trace {trace.trace_id}: exported target does not round-trip through the parser"
            )
        bundle = render_standard(trace.record)
        examples.append(SftExample(
            system_text=bundle.system_text,
            user_text=bundle.user_text,
            target_text=target,
            source_trace_id=trace.trace_id,
            label=label,
        ))
    return examples


def build_baseline_examples(records: Corpus) -> list[SftExample]:
    """Answer-only targets (no think block): direct SFT on observed tuples."""
    examples = []
    for record in records:
        bundle = render_standard(record)
        examples.append(SftExample(
            system_text=bundle.system_text,
            user_text=bundle.user_text,
            target_text=f"<answer>{record.label.serialized}</answer>",
            source_trace_id=f"baseline-{sha256_hex(record.key_str())[:16]}",
            label=record.label,
        ))
    return examples


def export_sft_corpus(
    traces: list[ReasoningTrace],
    path: Path | str,
    only_retained: bool = True,
    header: dict | None = None,
) -> list[SftExample]:
    examples = build_sft_examples(traces, only_retained=only_retained)
    write_jsonl(path, (example.to_row() for example in examples), header=header)
    return examples


def export_baseline_corpus(records: Corpus, path: Path | str, header: dict | None = None) -> list[SftExample]:
    examples = build_baseline_examples(records)
    write_jsonl(path, (example.to_row() for example in examples), header=header)
    return examples


def write_trace_log(traces: list[ReasoningTrace], path: Path | str, header: dict | None = None) -> None:
    write_jsonl(path, (trace.to_row() for trace in traces), header=header)


def default_abbreviations() -> frozenset[str]:
    text = resources.files("pertcot.templates").joinpath("abbreviations.txt").read_text("utf-8")
    tokens = [line.strip().casefold() for line in text.splitlines()
              if line.strip() and not line.startswith("#")]
    return frozenset(tokens)


def split_sentences(text: str, abbreviations: frozenset[str] | None = None) -> list[str]:
    """Clause splitter for factuality audits.

    Splits on '.', '!' or '?' followed by whitespace (or end of text),
    except inside parentheses and after known abbreviations.
    """
    if abbreviations is None:
        abbreviations = default_abbreviations()
    sentences: list[str] = []
    start = 0
    depth = 0
    for i, ch in enumerate(text):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth = max(0, depth - 1)
        elif ch in ".!?" and depth == 0:
            at_end = i + 1 == len(text)
            if not at_end and not text[i + 1].isspace():
                continue
            if ch == ".":
                # Walk back over the preceding token (letters plus internal dots)
                # and skip the break when it is a known abbreviation.
                j = i - 1
                while j >= 0 and (text[j].isalpha() or text[j] == "."):
                    j -= 1
                token = text[j + 1:i].casefold()
                if token in abbreviations:
                    continue
            sentence = text[start:i + 1].strip()
            if sentence:
                sentences.append(sentence)
            start = i + 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def annotate_factuality(
    trace: ReasoningTrace,
    clause_verdicts: list[bool],
    abbreviations: frozenset[str] | None = None,
) -> ReasoningTrace:
    """Attach a factuality score: the fraction of think-block clauses judged correct."""
    if trace.think_text is None:
        raise CorpusError(f"trace {trace.trace_id} has no think block to annotate")
    clauses = split_sentences(trace.think_text, abbreviations=abbreviations)
    if len(clauses) != len(clause_verdicts):
        raise CorpusError(
            f"trace {trace.trace_id}: {len(clause_verdicts)} verdicts for "
            f"{len(clauses)} clauses"
        )
    score = sum(clause_verdicts) / len(clause_verdicts)
    return dataclasses.replace(trace, factuality_score=score)
