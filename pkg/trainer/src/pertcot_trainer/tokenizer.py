"""Byte-level tokenizer with chat-turn special tokens.

Self-contained (no vocabulary downloads): ids 0-255 are raw UTF-8 bytes,
followed by the special tokens. The chat template wraps one (system, user,
target) exchange; loss masking applies to everything after the assistant
marker.
"""

from __future__ import annotations

from dataclasses import dataclass

BYTE_VOCAB = 256
PAD, BOS, SYSTEM, USER, ASSISTANT, END = range(BYTE_VOCAB, BYTE_VOCAB + 6)
VOCAB_SIZE = BYTE_VOCAB + 6

SPECIAL_NAMES = {PAD: "<|pad|>", BOS: "<|bos|>", SYSTEM: "<|system|>",
                 USER: "<|user|>", ASSISTANT: "<|assistant|>", END: "<|end|>"}


@dataclass(frozen=True)
class ChatEncoding:
    ids: list[int]
    target_mask: list[bool]  # True where the token belongs to the target span

    @property
    def n_target_tokens(self) -> int:
        return sum(self.target_mask)


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_ids(ids: list[int]) -> str:
    return bytes(i for i in ids if i < BYTE_VOCAB).decode("utf-8", errors="replace")


def encode_chat(system: str, user: str, target: str | None = None) -> ChatEncoding:
    """Apply the chat template; the target span (when given) ends with <|end|>.

    An empty target yields an empty span: no tokens, no loss contribution
    (the loss-masking probe relies on this degenerate case).
    """
    prompt = [BOS, SYSTEM, *encode_text(system), USER, *encode_text(user), ASSISTANT]
    mask = [False] * len(prompt)
    ids = prompt
    if target:
        target_ids = [*encode_text(target), END]
        ids = prompt + target_ids
        mask = mask + [True] * len(target_ids)
    return ChatEncoding(ids=ids, target_mask=mask)
