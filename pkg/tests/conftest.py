import sys
from pathlib import Path

import pytest

from pertcot.corpus import ingest_corpus

DATA_DIR = Path(__file__).parent / "data"

# Make the oracle helpers importable as a plain module from any test file.
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def mini_corpus_path() -> Path:
    return DATA_DIR / "mini_corpus.jsonl"


@pytest.fixture(scope="session")
def mini_corpus(mini_corpus_path):
    return ingest_corpus(mini_corpus_path)
