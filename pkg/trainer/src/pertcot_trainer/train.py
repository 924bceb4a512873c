"""Adapter fine-tuning over an exported SFT corpus.

Hyperparameter defaults follow the published training setup (learning
rate 1e-4 with AdamW, batch size 4, 5 linear warmup steps, 2048 max
sequence length, 50 epochs); everything is overridable. The checkpoint
directory records the full provenance: adapter factors, base-model
identity, and every hyperparameter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import TrainerError, __version__
from .data import SftExample, collate, encode_example, load_corpus, masked_lm_loss
from .lora import adapter_parameters, adapter_state_dict, apply_lora
from .model import DEFAULT_PRESET, TinyCausalLM, load_base_model


@dataclass
class TrainSpec:
    corpus_path: str | Path
    base_model: str = DEFAULT_PRESET
    learning_rate: float = 1e-4
    batch_size: int = 4
    warmup_steps: int = 5
    max_seq_len: int = 2048
    epochs: int = 50
    adapter_output: str | Path = "adapter"
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_dropout: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    precision: str = "auto"  # bf16 where supported, else fp32


@dataclass
class TrainResult:
    checkpoint_dir: Path
    loss_log_path: Path
    initial_loss: float
    final_loss: float
    steps: int
    adapted_layers: list[str] = field(default_factory=list)


def _resolve_dtype(precision: str) -> torch.dtype:
    if precision == "bf16":
        return torch.bfloat16
    if precision == "fp32":
        return torch.float32
    if precision == "auto":
        # 16-bit brain float where the CPU/accelerator genuinely supports it.
        if torch.cuda.is_available() and torch.cuda.is_bf16_supported():
            return torch.bfloat16
        return torch.float32
    raise TrainerError(f"unknown precision {precision!r}")


def example_loss(model: TinyCausalLM, example: SftExample, max_seq_len: int = 2048) -> tuple[float, int]:
    """Loss contribution of one example; the probe for loss masking."""
    encoding = encode_example(example, max_seq_len)
    ids, labels = collate([encoding])
    with torch.no_grad():
        loss, n_target = masked_lm_loss(model(ids), labels)
    return float(loss.item()), n_target


def train(spec: TrainSpec) -> TrainResult:
    """Fit the adapter, write the checkpoint and a per-step loss log."""
    examples = load_corpus(spec.corpus_path)
    model, base_provenance = load_base_model(str(spec.base_model))
    dtype = _resolve_dtype(spec.precision)
    if dtype is not torch.float32:
        model = model.to(dtype)

    torch.manual_seed(spec.seed)
    adapted = apply_lora(model, rank=spec.lora_rank, alpha=spec.lora_alpha,
                         dropout=spec.lora_dropout)
    if dtype is not torch.float32:
        model = model.to(dtype)
    parameters = adapter_parameters(model)
    optimizer = torch.optim.AdamW(parameters, lr=spec.learning_rate,
                                  betas=spec.adam_betas, weight_decay=spec.weight_decay)

    encodings = [encode_example(example, spec.max_seq_len) for example in examples]
    generator = torch.Generator().manual_seed(spec.seed)

    output_dir = Path(spec.adapter_output)
    output_dir.mkdir(parents=True, exist_ok=True)
    loss_log_path = output_dir / "loss_log.jsonl"

    model.train()
    step = 0
    losses: list[float] = []
    with loss_log_path.open("w", encoding="utf-8") as log:
        for epoch in range(spec.epochs):
            order = torch.randperm(len(encodings), generator=generator).tolist()
            for start in range(0, len(order), spec.batch_size):
                batch = [encodings[i] for i in order[start:start + spec.batch_size]]
                ids, labels = collate(batch)
                logits = model(ids)
                loss, n_target = masked_lm_loss(logits, labels)
                optimizer.zero_grad()
                loss.backward()
                # Linear warmup to the configured rate, then constant.
                scale = min(1.0, (step + 1) / spec.warmup_steps) if spec.warmup_steps else 1.0
                for group in optimizer.param_groups:
                    group["lr"] = spec.learning_rate * scale
                optimizer.step()
                losses.append(float(loss.item()))
                log.write(json.dumps({"step": step, "epoch": epoch,
                                      "loss": losses[-1], "target_tokens": n_target}) + "\n")
                step += 1

    torch.save(adapter_state_dict(model), output_dir / "adapter.pt")
    metadata = {
        "tool": f"pertcot-trainer {__version__}",
        "base_model": base_provenance,
        "adapted_layers": adapted,
        "hyperparameters": {
            **{k: v for k, v in asdict(spec).items() if k not in ("corpus_path", "adapter_output")},
            "adam_betas": list(spec.adam_betas),
            "precision_resolved": str(dtype).replace("torch.", ""),
        },
        "n_examples": len(examples),
        "steps": step,
    }
    (output_dir / "adapter_config.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return TrainResult(
        checkpoint_dir=output_dir,
        loss_log_path=loss_log_path,
        initial_loss=losses[0],
        final_loss=losses[-1],
        steps=step,
        adapted_layers=adapted,
    )


def load_checkpoint(checkpoint_dir: Path | str) -> tuple[TinyCausalLM, dict]:
    """Rebuild the adapted model from a checkpoint directory."""
    from .lora import load_adapter

    checkpoint_dir = Path(checkpoint_dir)
    config_path = checkpoint_dir / "adapter_config.json"
    if not config_path.exists():
        raise TrainerError(f"{checkpoint_dir} is not an adapter checkpoint (no adapter_config.json)")
    metadata = json.loads(config_path.read_text(encoding="utf-8"))
    base = metadata["base_model"]
    identifier = base["path"] if base["kind"] == "directory" else base["preset"]
    model, _ = load_base_model(identifier)
    hyper = metadata["hyperparameters"]
    apply_lora(model, rank=hyper["lora_rank"], alpha=hyper["lora_alpha"],
               dropout=hyper["lora_dropout"])
    load_adapter(model, checkpoint_dir / "adapter.pt")
    model.eval()
    return model, metadata
