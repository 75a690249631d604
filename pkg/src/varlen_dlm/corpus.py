"""Synthetic prompt/response tasks with checkable, variable-length answers."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .packing import DialoguePair

TASKS = ("copy", "reverse", "addition", "repeat-n")
DIGITS = "0123456789"


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kinds: tuple = ("copy", "addition")
    min_len: int = 5
    max_len: int = 40
    max_operand: int = 999
    alphabet: str = DIGITS
    repeat_symbols: str = "abcde"
    count: int = 10000

    def validate(self) -> None:
        if not self.kinds or any(k not in TASKS for k in self.kinds):
            raise ValueError(f"task kinds must be drawn from {TASKS}, got {self.kinds}")
        if not self.alphabet or ("repeat-n" in self.kinds and not self.repeat_symbols):
            raise ValueError("empty alphabet")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.max_operand < 0 or self.count < 0:
            raise ValueError("max_operand and count must be non-negative")


def solve(kind: str, task_input: str) -> str:
    if kind == "copy":
        return task_input
    if kind == "reverse":
        return task_input[::-1]
    if kind == "addition":
        a, b = task_input.split("+")
        return str(int(a) + int(b))
    if kind == "repeat-n":
        sym, n = task_input.split("*")
        return sym * int(n)
    raise ValueError(f"unknown task {kind!r}")


def format_prompt(kind: str, task_input: str) -> str:
    tag = {"copy": "C", "reverse": "R"}.get(kind, "")
    return f"{tag}{task_input}="


def parse_prompt(prompt: str) -> tuple[str, str]:
    """Inverse of :func:`format_prompt`: ``"C417="`` -> ``("copy", "417")``."""
    if not prompt.endswith("="):
        raise ValueError(f"prompt {prompt!r} does not end with '='")
    body = prompt[:-1]
    if body[:1] == "C":
        return "copy", body[1:]
    if body[:1] == "R":
        return "reverse", body[1:]
    if "+" in body:
        return "addition", body
    if "*" in body:
        return "repeat-n", body
    raise ValueError(f"unrecognised prompt {prompt!r}")


def make_record(kind: str, task_input: str) -> dict:
    return {"task": kind, "input": task_input, "prompt": format_prompt(kind, task_input),
            "response": solve(kind, task_input)}


def _draw_input(kind, rng: np.random.Generator, spec: SyntheticTaskSpec) -> str:
    if kind in ("copy", "reverse"):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        return "".join(spec.alphabet[i] for i in rng.integers(0, len(spec.alphabet), n))
    if kind == "addition":
        a, b = rng.integers(0, spec.max_operand + 1, 2)
        return f"{a}+{b}"
    sym = spec.repeat_symbols[int(rng.integers(len(spec.repeat_symbols)))]
    return f"{sym}*{int(rng.integers(spec.min_len, spec.max_len + 1))}"


def gen_corpus(spec: SyntheticTaskSpec, seed: int) -> list[dict]:
    spec.validate()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(spec.count):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        out.append(make_record(kind, _draw_input(kind, rng, spec)))
    return out


def is_heldout(record: dict, fraction: float = 0.1) -> bool:
    """Stable split by content hash, identical across runs and machines."""
    digest = hashlib.sha256(f"{record['prompt']}\x00{record['response']}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64 < fraction


def split_records(records, fraction: float = 0.1):
    train, held = [], []
    for r in records:
        (held if is_heldout(r, fraction) else train).append(r)
    return train, held


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    records = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if not isinstance(rec.get("prompt"), str) or not isinstance(rec.get("response"), str):
            raise ValueError(f"{path}:{n}: record needs string fields 'prompt' and 'response'")
        records.append(rec)
    return records


def to_pairs(records, tokenizer) -> list[DialoguePair]:
    return [DialoguePair(tokenizer.encode(r["prompt"]), tokenizer.encode(r["response"])) for r in records]
