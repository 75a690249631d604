"""Hand-built stand-ins for a trained model.

They expose the same surface the decoders use (``config``, ``forward`` and
``forward_with_prefix``) but produce logits from a rule instead of weights.
Their "cache" stores raw token ids, so a rule can always see the full context.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .model import ModelConfig, PrefixCache


def _logits_for(targets, vocab_size: int, confidence: float) -> torch.Tensor:
    """Rows putting probability ``confidence`` on the target, the rest spread evenly."""
    if confidence >= 1.0:
        hi, lo = 0.0, -1e4
    else:
        hi = 0.0
        lo = math.log((1.0 - confidence) / (vocab_size - 1)) - math.log(confidence)
    out = torch.full((len(targets), vocab_size), lo, dtype=torch.float32)
    out[torch.arange(len(targets)), torch.as_tensor(targets, dtype=torch.long)] = hi
    return out


class RuleModel(nn.Module):
    """Base class; subclasses implement :meth:`rule`."""

    def __init__(self, vocab_size: int, max_positions: int = 4096):
        super().__init__()
        self.config = ModelConfig(vocab_size=vocab_size, dim=2, n_layers=1, n_heads=1, max_positions=max_positions)

    def rule(self, context: list, start: int, length: int) -> torch.Tensor:
        """Logits (length, vocab) for positions ``start..start+length-1`` of ``context``."""
        raise NotImplementedError

    def forward(self, tokens, attn_mask=None):
        rows = [self.rule(seq.tolist(), 0, len(seq)) for seq in tokens]
        return torch.stack(rows)

    def forward_with_prefix(self, tokens, cache: PrefixCache):
        seq = tokens[0]
        prefix = cache.keys[0][0, :, 0].long().tolist() if cache.length else []
        context = prefix + seq.tolist()
        logits = self.rule(context, len(prefix), len(seq))
        ids = seq.to(torch.float32)[None, :, None]
        return logits[None], [(ids, ids.clone())]


class ConstantModel(RuleModel):
    """Predicts ``token`` everywhere with a fixed confidence."""

    def __init__(self, vocab_size: int, token: int, confidence: float = 0.95, **kw):
        super().__init__(vocab_size, **kw)
        self.token = token
        self.confidence = confidence

    def rule(self, context, start, length):
        return _logits_for([self.token] * length, self.config.vocab_size, self.confidence)


class AnswerOracle(RuleModel):
    """Knows the right answer for any prompt.

    ``answer_fn(prompt_ids) -> answer_ids``; the prompt is the context up to and
    including the first ``prompt_end`` token. Generation position ``k`` gets
    ``answer[k]``, position ``len(answer)`` and beyond get EOS.
    """

    def __init__(self, vocab_size: int, answer_fn, prompt_end: int, eos_id: int, confidence: float = 1.0, **kw):
        super().__init__(vocab_size, **kw)
        self.answer_fn = answer_fn
        self.prompt_end = prompt_end
        self.eos_id = eos_id
        self.confidence = confidence

    def rule(self, context, start, length):
        if self.prompt_end in context:
            n_p = context.index(self.prompt_end) + 1
            answer = list(self.answer_fn(context[:n_p]))
        else:
            n_p, answer = len(context), []
        targets = []
        for pos in range(start, start + length):
            k = pos - n_p
            if k < 0:
                targets.append(context[pos])
            elif k < len(answer):
                targets.append(answer[k])
            else:
                targets.append(self.eos_id)
        return _logits_for(targets, self.config.vocab_size, self.confidence)


def task_oracle(tokenizer, confidence: float = 1.0) -> AnswerOracle:
    """A perfect model for the synthetic corpus tasks."""
    from .corpus import parse_prompt, solve

    def answer(prompt_ids):
        return tokenizer.encode(solve(*parse_prompt(tokenizer.decode(prompt_ids))))

    return AnswerOracle(tokenizer.vocab_size, answer, prompt_end=tokenizer.encode("=")[0],
                        eos_id=tokenizer.eos_id, confidence=confidence)
