"""Prediction runner and the three scoring protocols.

Scores are hard-label by default: a discrete answer maps to 1/0 under the
chosen binary view, which makes per-group AUROC equal the balanced
accuracy of the hard classifier. `scores` hooks accept externally
supplied real-valued scores without touching any other code path.

Invalid-response policy: a response whose tags or label failed strict
parsing is scored as a "not differentially expressed" prediction and
counted in the separately reported invalid rate. A parseable
"I do not know" is also scored as not-DE but is not a parse failure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .corpus import Corpus, Label, PerturbationRecord, cell_line_sort_key
from .errors import CorpusError
from .gateway import ChatRequest, DECISION_TEMPERATURE, Gateway
from .io import atomic_write_text, write_jsonl
from .parsing import AnswerOption, ParsedAnswer, parse_answer
from .prompts import render_direction, render_standard

CLASS_ORDER = (Label.NOT_DE, Label.UP, Label.DOWN)


class Protocol(Enum):
    STANDARD = "standard"
    DIRECTION_GIVEN = "direction_given"


class TruthView(Enum):
    DE_VS_NOT_DE = "de_vs_not_de"
    UP_VS_DOWN = "up_vs_down"


@dataclass(frozen=True)
class Prediction:
    record: PerturbationRecord
    parsed: ParsedAnswer
    de_score: float
    direction_score: float | None
    model_name: str
    protocol: Protocol
    raw_text: str = ""
    gateway_error: str | None = None

    @property
    def invalid(self) -> bool:
        return self.gateway_error is not None or not self.parsed.is_valid

    @property
    def effective_label(self) -> Label:
        """Three-class prediction with the not-DE fallback for unusable answers."""
        if self.invalid or self.parsed.answer is None:
            return Label.NOT_DE
        label = self.parsed.answer.to_label()
        return label if label is not None else Label.NOT_DE

    def to_row(self) -> dict:
        return {
            "cell_line": self.record.cell_line,
            "perturbation": self.record.perturbation_gene,
            "gene": self.record.target_gene,
            "label": self.record.label.serialized,
            "protocol": self.protocol.value,
            "model": self.model_name,
            "raw": self.raw_text,
            "answer": self.parsed.answer.value if self.parsed.answer else None,
            "validity": self.parsed.validity.value,
            "invalid": self.invalid,
            "de_score": self.de_score,
            "direction_score": self.direction_score,
            "error": self.gateway_error,
        }

    @classmethod
    def from_row(cls, row: dict) -> "Prediction":
        record = PerturbationRecord(
            cell_line=row["cell_line"],
            perturbation_gene=row["perturbation"],
            target_gene=row["gene"],
            label=Label(row["label"]),
        )
        return cls(
            record=record,
            parsed=parse_answer(row.get("raw", "")),
            de_score=float(row["de_score"]),
            direction_score=None if row.get("direction_score") is None else float(row["direction_score"]),
            model_name=row["model"],
            protocol=Protocol(row["protocol"]),
            raw_text=row.get("raw", ""),
            gateway_error=row.get("error"),
        )


def _score_prediction(parsed: ParsedAnswer, protocol: Protocol, ok: bool) -> tuple[float, float | None]:
    """Hard-label scores: DE view Up/Down->1 NotDE->0; direction view Up->1 Down->0."""
    answer = parsed.answer if (ok and parsed.is_valid) else None
    de_score = 1.0 if answer in (AnswerOption.UP, AnswerOption.DOWN) else 0.0
    if answer is AnswerOption.UP:
        direction = 1.0
    elif answer is AnswerOption.DOWN:
        direction = 0.0
    elif protocol is Protocol.DIRECTION_GIVEN:
        direction = 0.5  # unusable answer under a forced binary choice: uninformative rank
    else:
        direction = None
    return de_score, direction


def run_predictions(
    records: Corpus,
    gateway: Gateway,
    model_name: str,
    protocol: Protocol,
    train_manifest_keys: set[str] | None = None,
    max_output_tokens: int = 2048,
    on_progress=None,
) -> list[Prediction]:
    """Render, call at temperature 0, parse, and score one prediction per record.

    Under the direction protocol only records whose truth is up/down are
    evaluated. When a training manifest is supplied, any overlap between
    it and the evaluated records is a fatal leakage error.
    """
    if protocol is Protocol.DIRECTION_GIVEN:
        records = [r for r in records if r.label in (Label.UP, Label.DOWN)]
    if train_manifest_keys is not None:
        overlap = [r.key_str() for r in records if r.key_str() in train_manifest_keys]
        if overlap:
            raise CorpusError(
                f"evaluation/training leakage: {len(overlap)} records appear in the "
                f"training manifest (first: {overlap[0]})"
            )

    render = render_direction if protocol is Protocol.DIRECTION_GIVEN else render_standard
    requests = []
    for record in records:
        bundle = render(record)
        requests.append(ChatRequest(
            model_name=model_name,
            system_text=bundle.system_text,
            user_text=bundle.user_text,
            temperature=DECISION_TEMPERATURE,
            max_output_tokens=max_output_tokens,
        ))
    results = gateway.complete_batch(requests, on_progress=on_progress)

    predictions = []
    for record, result in zip(records, results):
        parsed = parse_answer(result.raw_text)
        de_score, direction_score = _score_prediction(parsed, protocol, result.ok)
        predictions.append(Prediction(
            record=record,
            parsed=parsed,
            de_score=de_score,
            direction_score=direction_score,
            model_name=model_name,
            protocol=protocol,
            raw_text=result.raw_text,
            gateway_error=result.error,
        ))
    return predictions


def write_predictions(predictions: list[Prediction], path: Path | str, header: dict | None = None) -> None:
    write_jsonl(path, (p.to_row() for p in predictions), header=header)


def _average_ranks(values: list[float]) -> list[float]:
    """1-based ranks with ties sharing their average rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        average = (i + j + 2) / 2  # ranks are 1-based
        for k in range(i, j + 1):
            ranks[order[k]] = average
        i = j + 1
    return ranks


def _group_auroc(positives: list[float], negatives: list[float]) -> float:
    """Pairwise-comparison AUROC with half credit for ties (rank form)."""
    ranks = _average_ranks(positives + negatives)
    n_pos, n_neg = len(positives), len(negatives)
    rank_sum = sum(ranks[:n_pos])
    u_statistic = rank_sum - n_pos * (n_pos + 1) / 2
    return u_statistic / (n_pos * n_neg)


@dataclass
class AurocResult:
    per_group: dict[str, float]
    mean: float
    skipped: list[dict]


def auroc_per_perturbation(predictions: list[Prediction], truth_view: TruthView) -> AurocResult:
    """Per-(cell line, perturbation) AUROC and its unweighted mean.

    Groups lacking one of the two truth classes cannot be ranked and are
    skipped, with reasons, rather than imputed at 0.5.
    """
    if truth_view is TruthView.UP_VS_DOWN:
        predictions = [p for p in predictions if p.record.label in (Label.UP, Label.DOWN)]

    groups: dict[str, list[tuple[bool, float]]] = {}
    for prediction in predictions:
        record = prediction.record
        key = f"{record.cell_line}/{record.perturbation_gene}"
        if truth_view is TruthView.DE_VS_NOT_DE:
            truth_positive = record.label in (Label.UP, Label.DOWN)
            score = prediction.de_score
        else:
            truth_positive = record.label is Label.UP
            score = prediction.direction_score
            if score is None:
                raise CorpusError(
                    f"prediction for {record.key} carries no direction score; "
                    "run the direction protocol for the up-vs-down view"
                )
        groups.setdefault(key, []).append((truth_positive, score))

    per_group: dict[str, float] = {}
    skipped: list[dict] = []
    for key in sorted(groups):
        members = groups[key]
        positives = [score for is_pos, score in members if is_pos]
        negatives = [score for is_pos, score in members if not is_pos]
        if not positives:
            skipped.append({"group": key, "reason": "no positive-class records in group"})
            continue
        if not negatives:
            skipped.append({"group": key, "reason": "no negative-class records in group"})
            continue
        per_group[key] = _group_auroc(positives, negatives)
    if not per_group:
        raise CorpusError("no scorable perturbation groups (every group lacks a truth class)")
    mean = sum(per_group.values()) / len(per_group)
    return AurocResult(per_group=per_group, mean=mean, skipped=skipped)


@dataclass
class EvalReport:
    model_name: str
    protocol: Protocol
    n_predictions: int
    invalid_rate: float
    per_perturbation_auroc: dict[str, float] | None = None
    mean_auroc: float | None = None
    skipped_perturbations: list[dict] | None = None
    confusion: list[list[int]] | None = None  # rows = truth, cols = prediction, class order
    per_class: dict[str, dict[str, float]] | None = None
    accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model_name,
            "protocol": self.protocol.value,
            "n_predictions": self.n_predictions,
            "invalid_rate": self.invalid_rate,
            "class_order": [label.serialized for label in CLASS_ORDER],
            "per_perturbation_auroc": self.per_perturbation_auroc,
            "mean_auroc": self.mean_auroc,
            "skipped_perturbations": self.skipped_perturbations,
            "confusion": self.confusion,
            "per_class": self.per_class,
            "accuracy": self.accuracy,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            model_name=data["model"],
            protocol=Protocol(data["protocol"]),
            n_predictions=data["n_predictions"],
            invalid_rate=data["invalid_rate"],
            per_perturbation_auroc=data.get("per_perturbation_auroc"),
            mean_auroc=data.get("mean_auroc"),
            skipped_perturbations=data.get("skipped_perturbations"),
            confusion=data.get("confusion"),
            per_class=data.get("per_class"),
            accuracy=data.get("accuracy"),
        )


def three_class_report(predictions: list[Prediction]) -> EvalReport:
    """Confusion matrix, per-class precision/recall/F1, accuracy, invalid rate."""
    if not predictions:
        raise CorpusError("cannot build a three-class report from zero predictions")
    not_standard = [p for p in predictions if p.protocol is not Protocol.STANDARD]
    if not_standard:
        raise CorpusError(
            "three-class metrics are defined on standard-protocol predictions; "
            f"got {len(not_standard)} from another protocol"
        )

    index = {label: i for i, label in enumerate(CLASS_ORDER)}
    confusion = [[0, 0, 0] for _ in CLASS_ORDER]
    invalid_count = 0
    for prediction in predictions:
        confusion[index[prediction.record.label]][index[prediction.effective_label]] += 1
        if prediction.invalid:
            invalid_count += 1

    total = len(predictions)
    per_class: dict[str, dict[str, float]] = {}
    for i, label in enumerate(CLASS_ORDER):
        tp = confusion[i][i]
        support = sum(confusion[i])
        predicted = sum(confusion[r][i] for r in range(len(CLASS_ORDER)))
        fp = predicted - tp
        fn = support - tp
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        # 2tp/(2tp+fp+fn) is the harmonic mean of precision and recall.
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        per_class[label.serialized] = {"precision": precision, "recall": recall, "f1": f1}

    accuracy = sum(confusion[i][i] for i in range(len(CLASS_ORDER))) / total
    return EvalReport(
        model_name=predictions[0].model_name,
        protocol=Protocol.STANDARD,
        n_predictions=total,
        invalid_rate=invalid_count / total,
        confusion=confusion,
        per_class=per_class,
        accuracy=accuracy,
    )


def build_report(predictions: list[Prediction]) -> EvalReport:
    """Full report for a prediction set: protocol decides which sections exist."""
    if not predictions:
        raise CorpusError("cannot evaluate zero predictions")
    protocols = {p.protocol for p in predictions}
    if len(protocols) > 1:
        raise CorpusError("predictions mix protocols; evaluate one file at a time")
    protocol = protocols.pop()

    if protocol is Protocol.STANDARD:
        report = three_class_report(predictions)
        auroc = auroc_per_perturbation(predictions, TruthView.DE_VS_NOT_DE)
    else:
        invalid_count = sum(1 for p in predictions if p.invalid)
        report = EvalReport(
            model_name=predictions[0].model_name,
            protocol=protocol,
            n_predictions=len(predictions),
            invalid_rate=invalid_count / len(predictions),
        )
        auroc = auroc_per_perturbation(predictions, TruthView.UP_VS_DOWN)
    report.per_perturbation_auroc = auroc.per_group
    report.mean_auroc = auroc.mean
    report.skipped_perturbations = auroc.skipped
    return report


def _per_cell_line_auroc(report: EvalReport) -> dict[str, tuple[float, int]]:
    """Unweighted per-cell-line means derived from the per-group map."""
    sums: dict[str, list[float]] = {}
    for key, value in (report.per_perturbation_auroc or {}).items():
        cell_line = key.split("/", 1)[0]
        sums.setdefault(cell_line, []).append(value)
    return {
        name: (sum(values) / len(values), len(values))
        for name, values in sorted(sums.items(), key=lambda kv: cell_line_sort_key(kv[0]))
    }


def render_report_table(report: EvalReport) -> str:
    """Human-readable layout: per-class metrics plus one AUROC column per cell line."""
    lines = [
        f"model: {report.model_name}    protocol: {report.protocol.value}    "
        f"n: {report.n_predictions}    invalid rate: {report.invalid_rate:.4f}",
        "",
    ]
    if report.per_class is not None:
        width = max(len(label.serialized) for label in CLASS_ORDER)
        lines.append(f"{'class'.ljust(width)}  {'prec':>6}  {'rec':>6}  {'f1':>6}")
        for label in CLASS_ORDER:
            metrics = report.per_class[label.serialized]
            lines.append(
                f"{label.serialized.ljust(width)}  {metrics['precision']:6.3f}  "
                f"{metrics['recall']:6.3f}  {metrics['f1']:6.3f}"
            )
        lines.append(f"accuracy: {report.accuracy:.4f}")
        lines.append("")
    if report.per_perturbation_auroc is not None:
        view = "DE vs not DE" if report.protocol is Protocol.STANDARD else "up vs down"
        lines.append(f"AUROC ({view}), averaged over perturbations:")
        per_line = _per_cell_line_auroc(report)
        names = list(per_line)
        name_width = max([5] + [len(n) for n in names])
        lines.append("  ".join(["cell line".ljust(12)] + [n.rjust(max(6, name_width)) for n in names]))
        lines.append("  ".join(["AUROC".ljust(12)] + [
            f"{per_line[n][0]:.2f}".rjust(max(6, name_width)) for n in names
        ]))
        lines.append("  ".join(["groups".ljust(12)] + [
            str(per_line[n][1]).rjust(max(6, name_width)) for n in names
        ]))
        lines.append(
            f"overall mean: {report.mean_auroc:.4f} over "
            f"{len(report.per_perturbation_auroc)} perturbation groups"
        )
        if report.skipped_perturbations:
            lines.append("")
            lines.append("skipped groups:")
            for entry in report.skipped_perturbations:
                lines.append(f"  {entry['group']}: {entry['reason']}")
    return "\n".join(lines).rstrip() + "\n"


def emit_report(report: EvalReport, path: Path | str, format: str) -> str:
    """Write the report as a human table or a machine-readable JSON file."""
    if format == "table":
        text = render_report_table(report)
    elif format == "machine":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    else:
        raise ValueError(f"unknown report format: {format!r}")
    atomic_write_text(path, text)
    return text


def load_report(path: Path | str) -> EvalReport:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return EvalReport.from_dict(data)
