"""Low-rank adapters over the model's linear layers.

The base model is frozen; only the A/B factors train. Adapters start at
zero delta (B is zero-initialized), so an untrained adapter reproduces the
base model exactly.
"""

from __future__ import annotations

import math
from pathlib import Path

import torch
from torch import nn

from . import TrainerError

# Linear submodules that receive adapters: attention projections, MLP, head.
TARGET_SUFFIXES = ("q_proj", "k_proj", "v_proj", "out_proj", "mlp_in", "mlp_out", "lm_head")


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = self.dropout(x) @ self.lora_a.T @ self.lora_b.T
        return self.base(x) + self.scale * delta


def apply_lora(model: nn.Module, rank: int = 16, alpha: float = 16.0,
               dropout: float = 0.0) -> list[str]:
    """Freeze the model and wrap the target linears; returns the adapted names."""
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    adapted: list[str] = []
    for name, module in list(model.named_modules()):
        if not isinstance(module, nn.Linear):
            continue
        if not any(name.endswith(suffix) for suffix in TARGET_SUFFIXES):
            continue
        parent_name, _, attr = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, attr, LoRALinear(module, rank, alpha, dropout))
        adapted.append(name)
    if not adapted:
        raise TrainerError("no adapter target layers found in the base model")
    return adapted


def adapter_parameters(model: nn.Module):
    return [p for n, p in model.named_parameters() if "lora_" in n]


def adapter_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters() if "lora_" in n}


def load_adapter(model: nn.Module, path: Path | str) -> None:
    state = torch.load(Path(path), map_location="cpu", weights_only=True)
    own = {n: p for n, p in model.named_parameters() if "lora_" in n}
    if set(state) != set(own):
        raise TrainerError(
            "adapter/checkpoint mismatch: stored factors do not line up with the "
            f"model's adapted layers ({len(state)} stored vs {len(own)} expected)"
        )
    with torch.no_grad():
        for name, tensor in state.items():
            if own[name].shape != tensor.shape:
                raise TrainerError(
                    f"adapter/checkpoint mismatch at {name}: "
                    f"{tuple(tensor.shape)} vs {tuple(own[name].shape)}"
                )
            own[name].copy_(tensor)
