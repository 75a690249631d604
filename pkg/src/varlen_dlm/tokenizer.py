"""Character-level tokenizer with reserved MASK / EOS / PAD ids."""
from __future__ import annotations

import json
from dataclasses import dataclass


@dataclass(frozen=True)
class SpecialTokens:
    mask: int
    eos: int
    pad: int

    def as_set(self) -> frozenset:
        return frozenset((self.mask, self.eos, self.pad))


class CharTokenizer:
    """Characters map to ids ``0..n-1`` in sorted order; specials follow."""

    def __init__(self, alphabet):
        chars = sorted(set(alphabet))
        if not chars:
            raise ValueError("empty alphabet")
        self.chars = "".join(chars)
        self._stoi = {c: i for i, c in enumerate(chars)}
        n = len(chars)
        self.specials = SpecialTokens(mask=n, eos=n + 1, pad=n + 2)

    @property
    def vocab_size(self) -> int:
        return len(self.chars) + 3

    @property
    def mask_id(self) -> int:
        return self.specials.mask

    @property
    def eos_id(self) -> int:
        return self.specials.eos

    @property
    def pad_id(self) -> int:
        return self.specials.pad

    def encode(self, text: str) -> list[int]:
        try:
            return [self._stoi[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        names = {self.mask_id: "<mask>", self.eos_id: "<eos>", self.pad_id: "<pad>"}
        return "".join(self.chars[i] if i < len(self.chars) else names[i] for i in map(int, ids))

    def to_json(self) -> str:
        return json.dumps({"kind": "char", "alphabet": self.chars})

    @classmethod
    def from_json(cls, text: str) -> "CharTokenizer":
        return cls(json.loads(text)["alphabet"])

    def __eq__(self, other):
        return isinstance(other, CharTokenizer) and other.chars == self.chars

    def __repr__(self):
        return f"CharTokenizer({self.chars!r})"


def build_tokenizer(corpus) -> CharTokenizer:
    """Build from an iterable of strings or of ``{"prompt", "response"}`` records."""
    alphabet = set()
    for item in corpus:
        if isinstance(item, str):
            alphabet.update(item)
        else:
            alphabet.update(item["prompt"])
            alphabet.update(item["response"])
    return CharTokenizer(alphabet)
