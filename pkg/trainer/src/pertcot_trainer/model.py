"""Tiny decoder-only language model, loadable from disk or a preset string.

`base_model` identifiers are either a directory produced by `save_model`
or a preset like ``tiny:d64-l2-h2-s2048-seed0`` that builds the same
weights deterministically from its seed.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from . import TrainerError
from .tokenizer import VOCAB_SIZE

_PRESET = re.compile(r"^tiny:d(?P<d>\d+)-l(?P<l>\d+)-h(?P<h>\d+)-s(?P<s>\d+)-seed(?P<seed>\d+)$")
DEFAULT_PRESET = "tiny:d64-l2-h2-s2048-seed0"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_head: int = 2
    n_layer: int = 2
    max_seq: int = 2048
    seed: int = 0


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.d_model % config.n_head:
            raise TrainerError("d_model must be divisible by n_head")
        self.n_head = config.n_head
        self.head_dim = config.d_model // config.n_head
        self.q_proj = nn.Linear(config.d_model, config.d_model)
        self.k_proj = nn.Linear(config.d_model, config.d_model)
        self.v_proj = nn.Linear(config.d_model, config.d_model)
        self.out_proj = nn.Linear(config.d_model, config.d_model)

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        batch, seq_len, _ = x.shape

        def heads(projected: torch.Tensor) -> torch.Tensor:
            return projected.view(batch, seq_len, self.n_head, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.q_proj(x)), heads(self.k_proj(x)), heads(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / self.head_dim ** 0.5 + causal_mask
        mixed = torch.softmax(scores, dim=-1) @ v
        merged = mixed.transpose(1, 2).reshape(batch, seq_len, -1)
        return self.out_proj(merged)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp_in = nn.Linear(config.d_model, 4 * config.d_model)
        self.mlp_out = nn.Linear(4 * config.d_model, config.d_model)

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), causal_mask)
        x = x + self.mlp_out(torch.nn.functional.gelu(self.mlp_in(self.ln2(x))))
        return x


class TinyCausalLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_seq, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layer))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        _, seq_len = ids.shape
        if seq_len > self.config.max_seq:
            raise TrainerError(f"sequence of {seq_len} exceeds model max {self.config.max_seq}")
        positions = torch.arange(seq_len, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(positions)
        causal = torch.triu(torch.full((seq_len, seq_len), float("-inf"), device=ids.device),
                            diagonal=1)
        for block in self.blocks:
            x = block(x, causal)
        return self.lm_head(self.ln_f(x))


def parse_preset(identifier: str) -> ModelConfig:
    match = _PRESET.match(identifier)
    if match is None:
        raise TrainerError(
            f"unknown base model {identifier!r}: not a directory and not a tiny: preset "
            f"(example: {DEFAULT_PRESET})"
        )
    return ModelConfig(
        d_model=int(match["d"]), n_layer=int(match["l"]), n_head=int(match["h"]),
        max_seq=int(match["s"]), seed=int(match["seed"]),
    )


def load_base_model(identifier: str) -> tuple[TinyCausalLM, dict]:
    """Model plus a provenance dict describing exactly which base this is."""
    path = Path(identifier)
    if path.is_dir():
        try:
            config = ModelConfig(**json.loads((path / "config.json").read_text()))
            model = TinyCausalLM(config)
            state = torch.load(path / "weights.pt", map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        except (OSError, json.JSONDecodeError, RuntimeError, TypeError) as exc:
            raise TrainerError(f"cannot load base model from {path}: {exc}") from exc
        return model, {"kind": "directory", "path": str(path), "config": asdict(config)}
    if identifier == "tiny:default":
        identifier = DEFAULT_PRESET
    config = parse_preset(identifier)
    return TinyCausalLM(config), {"kind": "preset", "preset": identifier, "config": asdict(config)}


def save_model(model: TinyCausalLM, directory: Path | str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(asdict(model.config), indent=2) + "\n")
    torch.save(model.state_dict(), directory / "weights.pt")
