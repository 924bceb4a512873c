import json
from pathlib import Path

import pytest

from pertcot.cli import main
from pertcot.io import read_jsonl

DATA_DIR = Path(__file__).parent / "data"


def run(*args, expect=0):
    code = main([str(a) for a in args])
    assert code == expect, f"exit {code} != {expect} for {args}"
    return code


def write_generation_fixture(run_dir: Path, path: Path, grades_by_index=None):
    """Scripted mock: generator echoes each record's label; critic grades by rule index."""
    rows = read_jsonl(run_dir / "splits" / "train.jsonl")
    rules = []
    for i, row in enumerate(rows):
        marker = f"the {row['perturbation']} gene on the {row['gene']} gene"
        think = f"THINK-{i} mechanism for {row['perturbation']}/{row['gene']}."
        rules.append({
            "user_contains": marker,
            "system_contains": "is given to you",
            "text": f"<think>{think}</think><answer>{row['label']}</answer>",
        })
        grade = "excellent" if grades_by_index is None else grades_by_index(i)
        rules.append({
            "user_contains": f"THINK-{i} ",
            "system_contains": "acting as a critic",
            "text": f"<reasoning>r</reasoning><evaluation>{grade}</evaluation>",
        })
    fixture = {"default": "<answer>not differentially expressed</answer>", "rules": rules}
    path.write_text(json.dumps(fixture))
    return len(rows)


@pytest.fixture()
def run_dir(tmp_path):
    return tmp_path / "run"


@pytest.fixture()
def ingested(run_dir):
    run("--run-dir", run_dir, "ingest", "--corpus", DATA_DIR / "mini_corpus.jsonl")
    return run_dir


class TestIngestAndStats:
    def test_ingest_writes_normalized_corpus(self, ingested):
        rows = read_jsonl(ingested / "corpus.jsonl")
        assert len(rows) == 60
        head = (ingested / "corpus.jsonl").read_text().splitlines()[0]
        assert head.startswith("# ") and "config_digest" in head

    def test_ingest_does_not_touch_input(self, run_dir):
        source = DATA_DIR / "mini_corpus.jsonl"
        before = source.read_bytes()
        run("--run-dir", run_dir, "ingest", "--corpus", source)
        assert source.read_bytes() == before

    def test_stats_matches_committed_golden(self, ingested, capsys):
        run("--run-dir", ingested, "stats")
        body = (ingested / "reports" / "stats.txt").read_text().split("\n", 1)[1]
        assert body == (DATA_DIR / "mini_stats_golden.txt").read_text()
        machine = json.loads((ingested / "reports" / "stats.json").read_text())
        assert machine["totals"]["n_direction_task"] == 27
        assert list(machine["cell_lines"]) == ["K562", "RPE1", "HepG2", "Jurkat"]

    def test_stats_requires_corpus(self, run_dir):
        run("--run-dir", run_dir, "stats", expect=2)

    def test_duplicate_corpus_is_data_error(self, run_dir, tmp_path):
        bad = tmp_path / "bad.jsonl"
        row = json.dumps({"cell_line": "K562", "perturbation": "A", "gene": "B", "label": "upregulated"})
        bad.write_text(row + "\n" + row + "\n")
        run("--run-dir", run_dir, "ingest", "--corpus", bad, expect=2)


class TestSplit:
    def test_fraction_split_writes_both_files(self, ingested):
        run("--run-dir", ingested, "split", "--fraction", "0.75", "--seed", "7")
        train = read_jsonl(ingested / "splits" / "train.jsonl")
        test = read_jsonl(ingested / "splits" / "test.jsonl")
        assert len(train) + len(test) == 60
        assert all(r["split"] == "train" for r in train)
        assert all(r["split"] == "test" for r in test)

    def test_split_is_idempotent_byte_identical(self, ingested):
        run("--run-dir", ingested, "split", "--seed", "7")
        first = (ingested / "splits" / "train.jsonl").read_bytes()
        run("--run-dir", ingested, "split", "--seed", "7")
        assert (ingested / "splits" / "train.jsonl").read_bytes() == first

    def test_holdout_regime(self, ingested):
        run("--run-dir", ingested, "split", "--holdout", "RPE1")
        train = read_jsonl(ingested / "splits" / "train.jsonl")
        test = read_jsonl(ingested / "splits" / "test.jsonl")
        assert all(r["cell_line"] != "RPE1" for r in train)
        assert {r["cell_line"] for r in test} == {"RPE1"}
        assert len(test) == 15

    def test_unknown_holdout_is_data_error(self, ingested):
        run("--run-dir", ingested, "split", "--holdout", "HeLa", expect=2)

    def test_external_and_holdout_conflict(self, ingested):
        run("--run-dir", ingested, "split", "--external", "--holdout", "RPE1", expect=1)

    def test_external_requires_split_column(self, ingested):
        run("--run-dir", ingested, "split", "--external", expect=2)


class TestGenerateExport:
    def test_approach2_retention_follows_fixture(self, ingested, tmp_path):
        run("--run-dir", ingested, "split", "--seed", "7")
        fixture = tmp_path / "fixture.json"
        n = write_generation_fixture(
            ingested, fixture,
            grades_by_index=lambda i: "excellent" if i % 3 == 0 else "good")
        run("--run-dir", ingested, "generate", "--approach", "2",
            "--generator-model", "gen-x", "--critic-model", "critic-x",
            "--backend", "mock", "--fixture", fixture)
        traces = read_jsonl(ingested / "traces" / "traces.jsonl")
        assert len(traces) == n
        expected = len([i for i in range(n) if i % 3 == 0])
        assert sum(t["retained"] for t in traces) == expected

    def test_export_roundtrips_and_manifest(self, ingested, tmp_path):
        run("--run-dir", ingested, "split", "--seed", "7")
        fixture = tmp_path / "fixture.json"
        write_generation_fixture(ingested, fixture)
        run("--run-dir", ingested, "generate", "--approach", "2",
            "--generator-model", "g", "--critic-model", "c",
            "--backend", "mock", "--fixture", fixture)
        run("--run-dir", ingested, "export")
        rows = read_jsonl(ingested / "sft" / "corpus.jsonl")
        assert rows, "everything excellent and echoed -> all retained"
        assert all(row["target"].startswith("<think>") for row in rows)
        manifest = json.loads((ingested / "sft" / "train_manifest.json").read_text())
        assert len(manifest["keys"]) == len(rows)

    def test_generate_mock_requires_fixture(self, ingested):
        run("--run-dir", ingested, "split", "--seed", "7")
        run("--run-dir", ingested, "generate", "--approach", "1",
            "--generator-model", "g", "--backend", "mock", expect=1)

    def test_generate_without_model_is_config_error(self, ingested, tmp_path):
        run("--run-dir", ingested, "split", "--seed", "7")
        fixture = tmp_path / "f.json"
        fixture.write_text(json.dumps({"default": "x"}))
        run("--run-dir", ingested, "generate", "--approach", "1",
            "--backend", "mock", "--fixture", fixture, expect=1)

    def test_baseline_export_with_rebalance(self, ingested):
        run("--run-dir", ingested, "split", "--seed", "7")
        run("--run-dir", ingested, "export", "--baseline", "--rebalance",
            "--rebalance-seed", "3")
        rows = read_jsonl(ingested / "sft" / "baseline.jsonl")
        by_label = {}
        for row in rows:
            by_label[row["label"]] = by_label.get(row["label"], 0) + 1
        assert len(set(by_label.values())) == 1  # exactly equal class counts
        assert all("<think>" not in row["target"] for row in rows)

    def test_export_requires_traces(self, ingested):
        run("--run-dir", ingested, "export", expect=2)


class TestPredictEvaluate:
    def prepare(self, run_dir, tmp_path, protocol="standard"):
        run("--run-dir", run_dir, "split", "--seed", "7")
        fixture = tmp_path / "predict_fixture.json"
        fixture.write_text(json.dumps({
            "default": "<answer>upregulated</answer>",
        }))
        run("--run-dir", run_dir, "predict", "--protocol", protocol,
            "--model", "student-x", "--backend", "mock", "--fixture", fixture)

    def test_predict_then_evaluate_standard(self, ingested, tmp_path):
        self.prepare(ingested, tmp_path)
        predictions = read_jsonl(ingested / "predictions" / "standard.jsonl")
        test_rows = read_jsonl(ingested / "splits" / "test.jsonl")
        assert len(predictions) == len(test_rows)
        run("--run-dir", ingested, "evaluate")
        report = json.loads((ingested / "reports" / "eval_standard.json").read_text())
        assert report["n_predictions"] == len(predictions)
        assert report["invalid_rate"] == 0.0
        assert report["confusion"] is not None

    def test_direction_protocol_subsets(self, ingested, tmp_path):
        self.prepare(ingested, tmp_path, protocol="direction")
        predictions = read_jsonl(ingested / "predictions" / "direction_given.jsonl")
        test_rows = read_jsonl(ingested / "splits" / "test.jsonl")
        de_rows = [r for r in test_rows if r["label"] != "not differentially expressed"]
        assert len(predictions) == len(de_rows)

    def test_leakage_check_fatal(self, ingested, tmp_path):
        run("--run-dir", ingested, "split", "--seed", "7")
        test_rows = read_jsonl(ingested / "splits" / "test.jsonl")
        keys = [f"{r['cell_line']}|{r['perturbation']}|{r['gene']}" for r in test_rows]
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"keys": keys}))
        fixture = tmp_path / "f.json"
        fixture.write_text(json.dumps({"default": "<answer>upregulated</answer>"}))
        run("--run-dir", ingested, "predict", "--model", "m", "--backend", "mock",
            "--fixture", fixture, "--train-manifest", manifest, expect=2)

    def test_report_renders_table(self, ingested, tmp_path, capsys):
        self.prepare(ingested, tmp_path)
        run("--run-dir", ingested, "evaluate")
        capsys.readouterr()
        run("--run-dir", ingested, "report")
        out = capsys.readouterr().out
        assert "AUROC" in out and "accuracy:" in out

    def test_evaluate_requires_predictions(self, ingested):
        run("--run-dir", ingested, "evaluate", expect=2)


class TestRunDirectoryHygiene:
    def test_lock_blocks_concurrent_commands(self, ingested):
        (ingested / ".lock").write_text("12345")
        run("--run-dir", ingested, "stats", expect=1)
        (ingested / ".lock").unlink()
        run("--run-dir", ingested, "stats")

    def test_config_lock_written(self, ingested):
        run("--run-dir", ingested, "stats")
        lock = json.loads((ingested / "config.lock").read_text())
        assert "corpus" in lock and "stats" in lock

    def test_config_file_supplies_models(self, ingested, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text("models:\n  generator: from-config\n  critic: from-config\n")
        fixture = tmp_path / "f.json"
        fixture.write_text(json.dumps({
            "default": "<think>t</think><answer>not differentially expressed</answer>"}))
        run("--run-dir", ingested, "split", "--seed", "7")
        run("--run-dir", ingested, "--config", config, "generate", "--approach", "1",
            "--backend", "mock", "--fixture", fixture)
        traces = read_jsonl(ingested / "traces" / "traces.jsonl")
        assert all(t["generator_model"] == "from-config" for t in traces)

    def test_unknown_flag_is_config_error(self, run_dir):
        run("--run-dir", run_dir, "stats", "--bogus-flag", expect=1)
