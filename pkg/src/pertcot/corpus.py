"""Canonical perturbation-outcome data model.

A corpus is an ordered list of :class:`PerturbationRecord`. Ingestion,
splitting, holdout, rebalancing and statistics all live here; every
operation is pure and deterministic given its inputs and seed.
"""

from __future__ import annotations

import csv
import dataclasses
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import CorpusError
from .io import iter_jsonl

# Table-layout order for the four cell lines of the bundled benchmark;
# unknown lines sort after these, alphabetically.
CANONICAL_CELL_LINE_ORDER = ("K562", "RPE1", "HepG2", "Jurkat")


class Label(Enum):
    """Three-way outcome of a knockdown on a target gene."""

    UP = "upregulated"
    DOWN = "downregulated"
    NOT_DE = "not differentially expressed"

    @property
    def serialized(self) -> str:
        return self.value


class Split(Enum):
    TRAIN = "train"
    TEST = "test"
    UNASSIGNED = "unassigned"


_LABEL_BY_NORMALIZED = {label.value.casefold(): label for label in Label}
_SPLIT_BY_NORMALIZED = {split.value: split for split in Split}


def _normalize_spaces(text: str) -> str:
    return " ".join(text.split())


def parse_label(text: str) -> Label:
    """Match a label string case-insensitively against the three legal forms."""
    key = _normalize_spaces(text).casefold()
    try:
        return _LABEL_BY_NORMALIZED[key]
    except KeyError:
        raise CorpusError(f"unknown label string: {text!r}") from None


def normalize_cell_line(name: str) -> str:
    trimmed = name.strip()
    if not trimmed:
        raise CorpusError("cell line name is empty")
    return trimmed


@dataclass(frozen=True)
class PerturbationRecord:
    """One experimental tuple: knockdown of `perturbation_gene`, readout on `target_gene`."""

    cell_line: str
    perturbation_gene: str
    target_gene: str
    label: Label
    split: Split = Split.UNASSIGNED

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.cell_line, self.perturbation_gene, self.target_gene)

    def key_str(self) -> str:
        return "|".join(self.key)

    def to_row(self) -> dict:
        row = {
            "cell_line": self.cell_line,
            "perturbation": self.perturbation_gene,
            "gene": self.target_gene,
            "label": self.label.serialized,
        }
        if self.split is not Split.UNASSIGNED:
            row["split"] = self.split.value
        return row


Corpus = list[PerturbationRecord]


@dataclass
class CellLineStats:
    by_label: dict[Label, int] = field(default_factory=lambda: {label: 0 for label in Label})
    by_split: dict[Split, int] = field(default_factory=lambda: {split: 0 for split in Split})

    @property
    def n_de_task(self) -> int:
        return sum(self.by_label.values())

    @property
    def n_direction_task(self) -> int:
        return self.by_label[Label.UP] + self.by_label[Label.DOWN]


@dataclass
class CorpusStats:
    per_cell_line: dict[str, CellLineStats]
    totals: CellLineStats

    @property
    def n_de_task(self) -> int:
        return self.totals.n_de_task

    @property
    def n_direction_task(self) -> int:
        return self.totals.n_direction_task


def _record_from_row(row: dict[str, str], lineno: int, source: str) -> PerturbationRecord:
    for column in ("cell_line", "perturbation", "gene", "label"):
        if row.get(column) in (None, ""):
            raise CorpusError(f"{source}:{lineno}: missing column {column!r}")
    try:
        label = parse_label(str(row["label"]))
    except CorpusError as exc:
        raise CorpusError(f"{source}:{lineno}: {exc}") from None
    split = Split.UNASSIGNED
    raw_split = row.get("split")
    if raw_split not in (None, ""):
        key = str(raw_split).strip().casefold()
        if key not in _SPLIT_BY_NORMALIZED:
            raise CorpusError(f"{source}:{lineno}: unknown split value: {raw_split!r}")
        split = _SPLIT_BY_NORMALIZED[key]
    return PerturbationRecord(
        cell_line=normalize_cell_line(str(row["cell_line"])),
        perturbation_gene=str(row["perturbation"]).strip(),
        target_gene=str(row["gene"]).strip(),
        label=label,
        split=split,
    )


def ingest_corpus(source: Path | str, format: str | None = None) -> Corpus:
    """Load a corpus from a JSONL or CSV file, in file order.

    The format is inferred from the suffix unless given explicitly.
    Duplicate (cell_line, perturbation, gene) keys are a hard error.
    """
    path = Path(source)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format not in ("jsonl", "csv"):
        raise CorpusError(f"unknown corpus format: {format!r}")

    rows: list[tuple[int, dict]]
    if format == "jsonl":
        rows = list(iter_jsonl(path))
    else:
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                # DictReader consumes the header as line 1.
                rows = [(i, row) for i, row in enumerate(reader, start=2)]
        except OSError as exc:
            raise CorpusError(f"cannot read {path}: {exc}") from exc

    corpus: Corpus = []
    seen: dict[tuple[str, str, str], int] = {}
    for lineno, row in rows:
        record = _record_from_row(row, lineno, str(path))
        previous = seen.get(record.key)
        if previous is not None:
            raise CorpusError(
                f"{path}:{lineno}: duplicate key {record.key} (first seen at line {previous})"
            )
        seen[record.key] = lineno
        corpus.append(record)
    return corpus


def compute_stats(corpus: Corpus) -> CorpusStats:
    """Count records by cell line, label and split. An empty corpus yields zeros."""
    per_cell_line: dict[str, CellLineStats] = {}
    totals = CellLineStats()
    for record in corpus:
        stats = per_cell_line.setdefault(record.cell_line, CellLineStats())
        stats.by_label[record.label] += 1
        stats.by_split[record.split] += 1
        totals.by_label[record.label] += 1
        totals.by_split[record.split] += 1
    return CorpusStats(per_cell_line=per_cell_line, totals=totals)


def cell_line_sort_key(name: str) -> tuple[int, str]:
    try:
        return (CANONICAL_CELL_LINE_ORDER.index(name), "")
    except ValueError:
        return (len(CANONICAL_CELL_LINE_ORDER), name)


def stats_to_dict(stats: CorpusStats) -> dict:
    """Machine-readable stats, keyed by cell line."""

    def section(entry: CellLineStats) -> dict:
        return {
            "labels": {label.serialized: entry.by_label[label] for label in Label},
            "splits": {split.value: entry.by_split[split] for split in Split},
            "n_de_task": entry.n_de_task,
            "n_direction_task": entry.n_direction_task,
        }

    ordered = sorted(stats.per_cell_line, key=cell_line_sort_key)
    return {
        "cell_lines": {name: section(stats.per_cell_line[name]) for name in ordered},
        "totals": section(stats.totals),
    }


def render_stats_table(stats: CorpusStats) -> str:
    """Fixed-width table with one row per cell line plus a totals row."""
    headers = ["cell line", "not DE", "up", "down", "DE task", "direction task", "train", "test", "unassigned"]

    def row_for(name: str, entry: CellLineStats) -> list[str]:
        return [
            name,
            f"{entry.by_label[Label.NOT_DE]:,}",
            f"{entry.by_label[Label.UP]:,}",
            f"{entry.by_label[Label.DOWN]:,}",
            f"{entry.n_de_task:,}",
            f"{entry.n_direction_task:,}",
            f"{entry.by_split[Split.TRAIN]:,}",
            f"{entry.by_split[Split.TEST]:,}",
            f"{entry.by_split[Split.UNASSIGNED]:,}",
        ]

    body = [row_for(name, stats.per_cell_line[name])
            for name in sorted(stats.per_cell_line, key=cell_line_sort_key)]
    body.append(row_for("TOTAL", stats.totals))
    widths = [max(len(headers[i]), *(len(row[i]) for row in body)) for i in range(len(headers))]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for row in body:
        lines.append(
            "  ".join(
                cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                for i, cell in enumerate(row)
            ).rstrip()
        )
    return "\n".join(lines) + "\n"


def assign_split(corpus: Corpus, fraction_train: float, seed: int) -> Corpus:
    """Assign train/test splits atomically per (cell_line, perturbation_gene) group.

    Groups are shuffled per cell line with a seeded RNG and assigned to
    Train until the cell line's train record count reaches the target
    fraction, so a held-out perturbation never leaks into Train.
    """
    if not 0.0 < fraction_train < 1.0:
        raise ValueError(f"fraction_train must be in (0, 1), got {fraction_train}")
    already = [r for r in corpus if r.split is not Split.UNASSIGNED]
    if already:
        raise CorpusError(
            f"{len(already)} records already carry a split assignment; refusing to re-split"
        )

    groups: dict[tuple[str, str], list[int]] = {}
    line_order: list[str] = []
    lines_to_groups: dict[str, list[tuple[str, str]]] = {}
    for index, record in enumerate(corpus):
        group_key = (record.cell_line, record.perturbation_gene)
        if group_key not in groups:
            groups[group_key] = []
            if record.cell_line not in lines_to_groups:
                lines_to_groups[record.cell_line] = []
                line_order.append(record.cell_line)
            lines_to_groups[record.cell_line].append(group_key)
        groups[group_key].append(index)

    rng = random.Random(seed)
    assignment: dict[int, Split] = {}
    for cell_line in line_order:
        group_keys = list(lines_to_groups[cell_line])
        rng.shuffle(group_keys)
        total = sum(len(groups[k]) for k in group_keys)
        target = fraction_train * total
        accumulated = 0
        for group_key in group_keys:
            members = groups[group_key]
            chosen = Split.TRAIN if accumulated < target else Split.TEST
            if chosen is Split.TRAIN:
                accumulated += len(members)
            for index in members:
                assignment[index] = chosen

    return [dataclasses.replace(r, split=assignment[i]) for i, r in enumerate(corpus)]


def holdout_cell_line(corpus: Corpus, held: str) -> tuple[Corpus, Corpus]:
    """Split off one entire cell line: everything else trains, `held` tests."""
    held = normalize_cell_line(held)
    present = {record.cell_line for record in corpus}
    if held not in present:
        raise CorpusError(f"cell line {held!r} not present in corpus (has: {sorted(present)})")
    train = [dataclasses.replace(r, split=Split.TRAIN) for r in corpus if r.cell_line != held]
    test = [dataclasses.replace(r, split=Split.TEST) for r in corpus if r.cell_line == held]
    return train, test


def balanced_sample_indices(labels: list[Label], seed: int) -> list[int]:
    """Indices of a seeded downsample where every class hits the minimum count.

    Returned sorted, so selecting by them preserves input order.
    """
    positions: dict[Label, list[int]] = {label: [] for label in Label}
    for index, label in enumerate(labels):
        positions[label].append(index)
    missing = [label.serialized for label in Label if not positions[label]]
    if missing:
        raise CorpusError(f"cannot rebalance: no records with label(s) {missing}")

    minimum = min(len(indices) for indices in positions.values())
    rng = random.Random(seed)
    kept: list[int] = []
    for label in Label:
        kept.extend(rng.sample(positions[label], minimum))
    kept.sort()
    return kept


def rebalance(corpus: Corpus, seed: int) -> Corpus:
    """Downsample each label class to the minimum class count, without replacement.

    Output preserves corpus order; membership is deterministic under seed.
    """
    kept = balanced_sample_indices([record.label for record in corpus], seed)
    return [corpus[i] for i in kept]
