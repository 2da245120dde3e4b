"""Vocabulary files and tokenization."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCT = re.compile(r"[^\w\s']|_")


def normalize(sentence: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", sentence.lower()).split()


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, sentences: Iterable[str]) -> "Vocabulary":
        words = sorted({w for s in sentences for w in normalize(s)} - set(RESERVED))
        return cls(list(RESERVED) + words)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, sentence: str) -> list[int]:
        return tokenize(sentence, self)

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.itos[i])
        return " ".join(words)


def tokenize(sentence: str, vocab: Vocabulary) -> list[int]:
    """Token ids for ``sentence``, out-of-vocabulary words mapped to UNK, terminated by EOS."""
    return [vocab.stoi.get(w, UNK) for w in normalize(sentence)] + [EOS]
