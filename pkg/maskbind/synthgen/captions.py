"""
captions.py - fixed 64-symbol caption vocabulary and templated captions

Captions stand in for dense VLM captions: a deterministic template over the
entity attributes ("<size> <color> <shape> moving <direction>", joined by "and").
"""

from __future__ import annotations

from typing import Dict, List, Sequence

PAD_ID = 0
SEP_ID = 1
AND_ID = 2

SHAPE_WORDS = ("circle", "square", "triangle")
COLOR_WORDS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SIZE_WORDS = ("small", "medium", "large")
DIRECTION_WORDS = ("left", "right", "up", "down", "still")

_WORDS: List[str] = ["<pad>", "<sep>", "and", "moving", "pulsing", "on", "black",
                     "background", "a", "with"]
_WORDS += list(SHAPE_WORDS) + list(COLOR_WORDS) + list(SIZE_WORDS) + list(DIRECTION_WORDS)
VOCAB_SIZE = 64
_WORDS += [f"<unused{i}>" for i in range(VOCAB_SIZE - len(_WORDS))]

VOCAB: Dict[str, int] = {w: i for i, w in enumerate(_WORDS)}
ID_TO_WORD: Dict[int, str] = {i: w for w, i in VOCAB.items()}


def encode_words(words: Sequence[str]) -> List[int]:
    return [VOCAB[w] for w in words]


def decode_ids(ids: Sequence[int]) -> List[str]:
    return [ID_TO_WORD[int(i)] for i in ids]


def entity_clause(size: str, color: str, shape: str, direction: str) -> List[int]:
    return encode_words([size, color, shape, "moving", direction])


def attribute_clause(color: str, shape: str, size: str) -> List[int]:
    """Per-entity attribute tokens appended by the rephraser."""
    return encode_words([color, shape, size])


def join_clauses(clauses: Sequence[Sequence[int]]) -> List[int]:
    out: List[int] = []
    for i, clause in enumerate(clauses):
        if i:
            out.append(AND_ID)
        out.extend(clause)
    return out


__all__ = [
    "PAD_ID", "SEP_ID", "AND_ID", "VOCAB", "VOCAB_SIZE", "ID_TO_WORD",
    "SHAPE_WORDS", "COLOR_WORDS", "SIZE_WORDS", "DIRECTION_WORDS",
    "encode_words", "decode_ids", "entity_clause", "attribute_clause", "join_clauses",
]
