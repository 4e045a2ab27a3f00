"""Byte-level tokenizer: 256 byte values plus a BOS marker.

Byte granularity keeps the vocabulary closed over any exported text and
makes character offsets easy to map onto token positions.
"""

from __future__ import annotations

BOS_ID = 256
VOCAB_SIZE = 257


def encode(text: str) -> list[int]:
    return [BOS_ID] + list(text.encode("utf-8"))


def decode(ids: list[int]) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def token_span(text: str, char_start: int, char_end: int) -> tuple[int, int]:
    """Token positions covering text[char_start:char_end], BOS included."""
    byte_start = len(text[:char_start].encode("utf-8"))
    byte_end = len(text[:char_end].encode("utf-8"))
    return 1 + byte_start, 1 + byte_end
