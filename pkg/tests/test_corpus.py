import json

import pytest

from pertcot.corpus import (
    Label,
    PerturbationRecord,
    Split,
    assign_split,
    compute_stats,
    holdout_cell_line,
    ingest_corpus,
    parse_label,
    rebalance,
    render_stats_table,
    stats_to_dict,
)
from pertcot.errors import CorpusError


def make_record(cell, pert, gene, label, split=Split.UNASSIGNED):
    return PerturbationRecord(cell, pert, gene, label, split)


class TestIngest:
    def test_jsonl_row_maps_to_record(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps(
            {"cell_line": "K562", "perturbation": "TMED2", "gene": "IER3", "label": "upregulated"}
        ) + "\n")
        corpus = ingest_corpus(path)
        assert corpus == [make_record("K562", "TMED2", "IER3", Label.UP)]

    def test_csv_roundtrip(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text(
            "cell_line,perturbation,gene,label\n"
            "RPE1,NCBP1,RPL28,downregulated\n"
            "RPE1,NCBP1,SRSF1,not differentially expressed\n"
        )
        corpus = ingest_corpus(path)
        assert [r.label for r in corpus] == [Label.DOWN, Label.NOT_DE]

    def test_label_match_is_case_insensitive(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps(
            {"cell_line": "K562", "perturbation": "A", "gene": "B", "label": "Not Differentially Expressed"}
        ) + "\n")
        assert ingest_corpus(path)[0].label is Label.NOT_DE

    def test_unknown_label_reports_row_and_text(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(
            json.dumps({"cell_line": "K562", "perturbation": "A", "gene": "B", "label": "upregulated"})
            + "\n"
            + json.dumps({"cell_line": "K562", "perturbation": "A", "gene": "C", "label": "Up-Regulated"})
            + "\n"
        )
        with pytest.raises(CorpusError, match=r"(?s):2:.*Up-Regulated"):
            ingest_corpus(path)

    def test_duplicate_key_reports_both_rows(self, tmp_path):
        row = {"cell_line": "K562", "perturbation": "A", "gene": "B", "label": "upregulated"}
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
        with pytest.raises(CorpusError, match=r"(?s):2:.*duplicate.*line 1"):
            ingest_corpus(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorpusError, match="cannot read"):
            ingest_corpus(tmp_path / "absent.jsonl")

    def test_external_split_column_accepted(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps(
            {"cell_line": "K562", "perturbation": "A", "gene": "B",
             "label": "upregulated", "split": "test"}
        ) + "\n")
        assert ingest_corpus(path)[0].split is Split.TEST

    def test_parse_label_strict_vocabulary(self):
        with pytest.raises(CorpusError):
            parse_label("up")


class TestStats:
    def test_mini_fixture_hand_counts(self, mini_corpus):
        stats = compute_stats(mini_corpus)
        expected = {
            "K562": (10, 5, 3),
            "RPE1": (9, 2, 4),
            "HepG2": (8, 4, 3),
            "Jurkat": (6, 3, 3),
        }
        for cell, (n, u, d) in expected.items():
            entry = stats.per_cell_line[cell]
            assert entry.by_label[Label.NOT_DE] == n
            assert entry.by_label[Label.UP] == u
            assert entry.by_label[Label.DOWN] == d
        assert stats.n_de_task == 60
        assert stats.n_direction_task == 27

    def test_direction_plus_notde_equals_de(self, mini_corpus):
        stats = compute_stats(mini_corpus)
        assert stats.n_direction_task + stats.totals.by_label[Label.NOT_DE] == stats.n_de_task

    def test_totals_sum_over_cell_lines(self, mini_corpus):
        stats = compute_stats(mini_corpus)
        for label in Label:
            assert stats.totals.by_label[label] == sum(
                entry.by_label[label] for entry in stats.per_cell_line.values()
            )

    def test_all_notde_corpus_has_zero_direction(self):
        corpus = [make_record("K562", "A", g, Label.NOT_DE) for g in "BCD"]
        assert compute_stats(corpus).n_direction_task == 0

    def test_empty_corpus_is_all_zero(self):
        stats = compute_stats([])
        assert stats.n_de_task == 0 and stats.per_cell_line == {}

    def test_machine_dict_keyed_by_cell_line(self, mini_corpus):
        data = stats_to_dict(compute_stats(mini_corpus))
        assert list(data["cell_lines"]) == ["K562", "RPE1", "HepG2", "Jurkat"]
        assert data["totals"]["n_direction_task"] == 27

    def test_table_renders_totals_row(self, mini_corpus):
        table = render_stats_table(compute_stats(mini_corpus))
        assert "TOTAL" in table and "27" in table


class TestAssignSplit:
    def synthetic(self, n_perturbations=1000, genes_per=5):
        corpus = []
        for cell in ("K562", "RPE1"):
            for p in range(n_perturbations):
                for g in range(genes_per):
                    label = Label.UP if (p + g) % 3 == 0 else Label.NOT_DE
                    corpus.append(make_record(cell, f"P{p:04d}", f"G{g}", label))
        return corpus

    def test_deterministic_under_seed(self, mini_corpus):
        a = assign_split(mini_corpus, 0.75, seed=7)
        b = assign_split(mini_corpus, 0.75, seed=7)
        assert a == b

    def test_seed_changes_assignment(self):
        corpus = self.synthetic(n_perturbations=50)
        a = assign_split(corpus, 0.75, seed=1)
        b = assign_split(corpus, 0.75, seed=2)
        assert a != b

    def test_realized_fraction_within_two_points(self):
        # Oracle: count per cell line on a 1000-perturbation synthetic corpus.
        corpus = self.synthetic()
        split = assign_split(corpus, 0.75, seed=13)
        for cell in ("K562", "RPE1"):
            rows = [r for r in split if r.cell_line == cell]
            train = sum(1 for r in rows if r.split is Split.TRAIN)
            assert 0.73 <= train / len(rows) <= 0.77

    def test_groups_stay_atomic(self):
        corpus = self.synthetic(n_perturbations=40)
        split = assign_split(corpus, 0.75, seed=3)
        by_group = {}
        for record in split:
            by_group.setdefault((record.cell_line, record.perturbation_gene), set()).add(record.split)
        assert all(len(splits) == 1 for splits in by_group.values())

    def test_single_perturbation_goes_wholly_one_way(self):
        corpus = [make_record("K562", "A", g, Label.NOT_DE) for g in "BCDEF"]
        split = assign_split(corpus, 0.75, seed=0)
        assert len({r.split for r in split}) == 1

    def test_fraction_out_of_range(self, mini_corpus):
        with pytest.raises(ValueError):
            assign_split(mini_corpus, 1.0, seed=0)

    def test_refuses_presplit_corpus(self, mini_corpus):
        split = assign_split(mini_corpus, 0.75, seed=7)
        with pytest.raises(CorpusError, match="already"):
            assign_split(split, 0.75, seed=7)

    def test_input_not_mutated(self, mini_corpus):
        before = list(mini_corpus)
        assign_split(mini_corpus, 0.75, seed=7)
        assert mini_corpus == before


class TestHoldout:
    def test_partition_is_exact(self, mini_corpus):
        train, test = holdout_cell_line(mini_corpus, "RPE1")
        assert all(r.cell_line == "RPE1" for r in test)
        assert all(r.cell_line != "RPE1" for r in train)
        assert len(train) + len(test) == len(mini_corpus)

    def test_keys_disjoint_union_preserved(self, mini_corpus):
        train, test = holdout_cell_line(mini_corpus, "RPE1")
        train_keys = {r.key for r in train}
        test_keys = {r.key for r in test}
        assert not train_keys & test_keys
        assert train_keys | test_keys == {r.key for r in mini_corpus}

    def test_absent_cell_line_errors(self, mini_corpus):
        with pytest.raises(CorpusError, match="HeLa"):
            holdout_cell_line(mini_corpus, "HeLa")


class TestRebalance:
    def skewed(self):
        corpus = []
        corpus += [make_record("K562", "P", f"N{i}", Label.NOT_DE) for i in range(100)]
        corpus += [make_record("K562", "P", f"U{i}", Label.UP) for i in range(10)]
        corpus += [make_record("K562", "P", f"D{i}", Label.DOWN) for i in range(14)]
        return corpus

    def test_downsamples_to_min_class(self):
        result = rebalance(self.skewed(), seed=5)
        counts = {label: sum(1 for r in result if r.label is label) for label in Label}
        assert counts == {Label.NOT_DE: 10, Label.UP: 10, Label.DOWN: 10}

    def test_deterministic_and_subset(self):
        corpus = self.skewed()
        a = rebalance(corpus, seed=5)
        assert a == rebalance(corpus, seed=5)
        assert set(r.key for r in a) <= set(r.key for r in corpus)

    def test_already_balanced_keeps_membership(self):
        corpus = [make_record("K562", "P", f"G{i}", label)
                  for label in Label for i in range(5)]
        result = rebalance(corpus, seed=1)
        assert sorted(r.key for r in result) == sorted(r.key for r in corpus)

    def test_missing_class_errors(self):
        corpus = [make_record("K562", "P", "A", Label.UP)]
        with pytest.raises(CorpusError, match="downregulated"):
            rebalance(corpus, seed=0)
