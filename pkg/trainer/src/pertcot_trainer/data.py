"""SFT corpus loading and batching.

Consumes the line-delimited corpus the pipeline exports: one JSON object
per line with `system`, `user`, `target` fields; `#` header lines are
skipped. Sequences over the length budget are truncated target-last.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import torch

from . import TrainerError
from .tokenizer import PAD, ChatEncoding, encode_chat


@dataclass(frozen=True)
class SftExample:
    system: str
    user: str
    target: str


def load_corpus(path: Path | str) -> list[SftExample]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TrainerError(f"cannot read corpus {path}: {exc}") from exc
    examples: list[SftExample] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            row = json.loads(stripped)
            examples.append(SftExample(system=row["system"], user=row["user"],
                                       target=row["target"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise TrainerError(f"{path}:{lineno}: bad corpus row: {exc}") from exc
    if not examples:
        raise TrainerError(f"corpus {path} holds no examples")
    return examples


def encode_example(example: SftExample, max_seq_len: int) -> ChatEncoding:
    encoding = encode_chat(example.system, example.user, example.target)
    if len(encoding.ids) > max_seq_len:
        warnings.warn(
            f"truncating a {len(encoding.ids)}-token example to {max_seq_len} "
            "(output truncation, target-last)",
            stacklevel=2,
        )
        encoding = ChatEncoding(ids=encoding.ids[:max_seq_len],
                                target_mask=encoding.target_mask[:max_seq_len])
    return encoding


def collate(encodings: list[ChatEncoding]) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad to the batch max; labels are -100 outside the target span.

    Labels are aligned to input positions (the shift happens in the loss).
    """
    width = max(len(e.ids) for e in encodings)
    ids = torch.full((len(encodings), width), PAD, dtype=torch.long)
    labels = torch.full((len(encodings), width), -100, dtype=torch.long)
    for i, encoding in enumerate(encodings):
        seq = torch.tensor(encoding.ids, dtype=torch.long)
        ids[i, :len(seq)] = seq
        for j, is_target in enumerate(encoding.target_mask):
            if is_target:
                labels[i, j] = encoding.ids[j]
    return ids, labels


def masked_lm_loss(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean cross-entropy over target tokens only; (zero, 0) when none."""
    shifted_logits = logits[:, :-1, :]
    shifted_labels = labels[:, 1:]
    flat_logits = shifted_logits.reshape(-1, shifted_logits.size(-1))
    flat_labels = shifted_labels.reshape(-1)
    n_target = int((flat_labels != -100).sum().item())
    if n_target == 0:
        return logits.sum() * 0.0, 0
    loss = torch.nn.functional.cross_entropy(flat_logits, flat_labels, ignore_index=-100)
    return loss, n_target
