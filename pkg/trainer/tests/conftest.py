from pathlib import Path

import pytest

PRIMARY_DATA = Path(__file__).resolve().parents[2] / "tests" / "data"


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory) -> Path:
    """32-example SFT corpus in the pipeline's export format.

    Built through the primary package's exporter so the trainer is tested
    against the real file contract.
    """
    from pertcot.corpus import ingest_corpus
    from pertcot.synthesis import export_baseline_corpus

    records = ingest_corpus(PRIMARY_DATA / "mini_corpus.jsonl")[:32]
    path = tmp_path_factory.mktemp("corpus") / "toy_sft.jsonl"
    export_baseline_corpus(records, path, header={"artifact": "sft"})
    assert len([l for l in path.read_text().splitlines() if not l.startswith("#")]) == 32
    return path


@pytest.fixture(scope="session")
def tiny_spec_kwargs():
    """Toy-scale settings: defaults except the learning rate (1e-4 cannot
    move a 64-dim byte model 20% in minutes; everything is overridable)."""
    return {"learning_rate": 1e-2, "epochs": 7, "seed": 0}


@pytest.fixture(scope="session")
def trained_checkpoint(toy_corpus, tiny_spec_kwargs, tmp_path_factory):
    from pertcot_trainer.train import TrainSpec, train

    out = tmp_path_factory.mktemp("checkpoint") / "adapter"
    result = train(TrainSpec(corpus_path=toy_corpus, adapter_output=out, **tiny_spec_kwargs))
    return result
