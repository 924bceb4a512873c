"""Low-rank-adapter fine-tuning and serving for pertcot SFT corpora."""

__version__ = "0.1.0"


class TrainerError(RuntimeError):
    """Bad corpus, checkpoint, or serving configuration."""
