"""Trainer CLI: `pertcot-trainer train` and `pertcot-trainer serve`."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import TrainerError
from .model import DEFAULT_PRESET
from .serve import serve_for_eval
from .train import TrainSpec, train


@click.group()
def cli():
    """Low-rank-adapter fine-tuning and serving for exported SFT corpora."""


@cli.command("train")
@click.option("--corpus", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--base-model", type=str, default=DEFAULT_PRESET, show_default=True,
              help="Saved model directory or a tiny:* preset.")
@click.option("--learning-rate", type=float, default=1e-4, show_default=True)
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.option("--warmup-steps", type=int, default=5, show_default=True)
@click.option("--max-seq-len", type=int, default=2048, show_default=True)
@click.option("--epochs", type=int, default=50, show_default=True)
@click.option("--adapter-output", type=click.Path(path_type=Path), default=Path("adapter"),
              show_default=True)
@click.option("--lora-rank", type=int, default=16, show_default=True)
@click.option("--lora-alpha", type=float, default=16.0, show_default=True)
@click.option("--lora-dropout", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--precision", type=click.Choice(["auto", "bf16", "fp32"]), default="auto",
              show_default=True)
def cmd_train(corpus, base_model, learning_rate, batch_size, warmup_steps, max_seq_len,
              epochs, adapter_output, lora_rank, lora_alpha, lora_dropout, seed, precision):
    """Fine-tune an adapter on an exported SFT corpus."""
    spec = TrainSpec(
        corpus_path=corpus, base_model=base_model, learning_rate=learning_rate,
        batch_size=batch_size, warmup_steps=warmup_steps, max_seq_len=max_seq_len,
        epochs=epochs, adapter_output=adapter_output, lora_rank=lora_rank,
        lora_alpha=lora_alpha, lora_dropout=lora_dropout, seed=seed, precision=precision,
    )
    result = train(spec)
    click.echo(
        f"trained {result.steps} steps: loss {result.initial_loss:.4f} -> "
        f"{result.final_loss:.4f}; checkpoint at {result.checkpoint_dir}"
    )


@cli.command("serve")
@click.option("--checkpoint", type=click.Path(path_type=Path, exists=True), required=True)
@click.option("--port", type=int, default=8399, show_default=True)
@click.option("--host", type=str, default="127.0.0.1", show_default=True)
@click.option("--max-new-tokens", type=int, default=256, show_default=True)
def cmd_serve(checkpoint, port, host, max_new_tokens):
    """Serve a checkpoint over the chat-completions protocol (greedy decoding)."""
    click.echo(f"serving {checkpoint} at http://{host}:{port}/v1/chat/completions", err=True)
    serve_for_eval(checkpoint, port=port, host=host, max_new_tokens_cap=max_new_tokens)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except TrainerError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
