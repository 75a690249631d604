"""Pack independent prompt/response pairs into fixed-length rows.

Row layout, per pair: prompt tokens, response tokens, one EOS separator.
Whatever is left after the last pair is PAD. Rows carry tokens and roles
only; the model attends over the whole row.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .masking import Role
from .tokenizer import SpecialTokens


@dataclass(frozen=True)
class DialoguePair:
    prompt: tuple
    response: tuple

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(i) for i in self.prompt))
        object.__setattr__(self, "response", tuple(int(i) for i in self.response))

    def __len__(self):
        return len(self.prompt) + len(self.response) + 1

    def validate(self, specials: SpecialTokens) -> None:
        if not self.prompt or not self.response:
            raise ValueError("prompt and response must both be non-empty")
        reserved = specials.as_set()
        if reserved.intersection(self.prompt) or reserved.intersection(self.response):
            raise ValueError("pair contains a reserved MASK/EOS/PAD id")


@dataclass
class PackedSequence:
    tokens: np.ndarray
    roles: np.ndarray
    pair_boundaries: list = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return len(self.pair_boundaries)

    @property
    def occupied(self) -> int:
        return self.pair_boundaries[-1][1] if self.pair_boundaries else 0


@dataclass
class PackResult:
    rows: list
    rejected: list

    def stats(self) -> dict:
        L = len(self.rows[0].tokens) if self.rows else 0
        occupied = sum(r.occupied for r in self.rows)
        counts = Counter(r.n_pairs for r in self.rows)
        return {
            "rows": len(self.rows),
            "pairs": sum(counts[k] * k for k in counts),
            "rejects": len(self.rejected),
            "fill_ratio": occupied / (L * len(self.rows)) if self.rows else 0.0,
            "pairs_per_row": {str(k): counts[k] for k in sorted(counts)},
        }


def _emit_row(pairs, L, specials: SpecialTokens) -> PackedSequence:
    tokens = np.full(L, specials.pad, dtype=np.int64)
    roles = np.full(L, Role.PAD, dtype=np.int8)
    spans = []
    pos = 0
    for pair in pairs:
        start = pos
        n_p, n_r = len(pair.prompt), len(pair.response)
        tokens[pos:pos + n_p] = pair.prompt
        roles[pos:pos + n_p] = Role.PROMPT
        pos += n_p
        tokens[pos:pos + n_r] = pair.response
        roles[pos:pos + n_r] = Role.RESPONSE
        pos += n_r
        tokens[pos] = specials.eos
        roles[pos] = Role.EOS_SEPARATOR
        pos += 1
        spans.append((start, pos))
    return PackedSequence(tokens, roles, spans)


def pack_samples(pairs, L: int, specials: SpecialTokens, close_prob: float = 0.0, rng=None) -> PackResult:
    """Next-fit packing in the given order.

    A pair that does not fit in the space left closes the current row and
    opens the next one. Pairs longer than ``L`` on their own (or malformed)
    are skipped and returned in ``rejected``.

    With ``close_prob > 0`` a row is also closed early, after each placed
    pair, with that probability (draws from ``rng``). This leaves rows whose
    last response runs into a long unused tail, the situation a decoder faces
    after the prompt.
    """
    if not 0.0 <= close_prob < 1.0:
        raise ValueError("close_prob must lie in [0, 1)")
    if close_prob and rng is None:
        raise ValueError("close_prob needs an rng")
    rows, rejected, current, used = [], [], [], 0
    for pair in pairs:
        try:
            pair.validate(specials)
        except ValueError:
            rejected.append(pair)
            continue
        need = len(pair)
        if need > L:
            rejected.append(pair)
            continue
        if used + need > L:
            rows.append(_emit_row(current, L, specials))
            current, used = [], 0
        current.append(pair)
        used += need
        if close_prob and rng.random() < close_prob:
            rows.append(_emit_row(current, L, specials))
            current, used = [], 0
    if current:
        rows.append(_emit_row(current, L, specials))
    return PackResult(rows, rejected)


def extract_pairs(row: PackedSequence) -> list:
    pairs = []
    for start, end in row.pair_boundaries:
        roles = row.roles[start:end]
        toks = row.tokens[start:end]
        pairs.append(DialoguePair(toks[roles == Role.PROMPT], toks[roles == Role.RESPONSE]))
    return pairs


@dataclass
class PackedBatch:
    rows: list

    @property
    def tokens(self) -> np.ndarray:
        return np.stack([r.tokens for r in self.rows])

    @property
    def roles(self) -> np.ndarray:
        return np.stack([r.roles for r in self.rows])

    def __len__(self):
        return len(self.rows)


def epoch_rows(pairs, L: int, specials: SpecialTokens, seed: int, epoch: int, close_prob: float = 0.0) -> PackResult:
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(pairs))
    return pack_samples([pairs[i] for i in order], L, specials, close_prob, rng)


def batch_iterator(dataset, L: int, batch_size: int, seed: int, specials: SpecialTokens, epochs=None,
                   close_prob: float = 0.0):
    """Yield :class:`PackedBatch` objects of exactly ``batch_size`` rows.

    Pair order is reshuffled every epoch from ``(seed, epoch)``, so any epoch
    can be regenerated on its own. A trailing partial batch is dropped.
    ``epochs=None`` cycles forever.
    """
    pairs = list(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    epoch = 0
    while epochs is None or epoch < epochs:
        rows = epoch_rows(pairs, L, specials, seed, epoch, close_prob).rows
        if len(rows) < batch_size and epochs is None:
            raise ValueError(f"one epoch packs into {len(rows)} rows, fewer than batch_size={batch_size}")
        for i in range(0, len(rows) - batch_size + 1, batch_size):
            yield PackedBatch(rows[i:i + batch_size])
        epoch += 1
