"""Bidirectional transformer denoiser with an append-only prefix K/V cache.

Every position attends to every other position; there is no causal mask.
The only masked attention in this module is :func:`frozen_prefix_forward`,
an inference-time reference computation for the cached decoder.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import NoisedBatch


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 2048
    seed: int = 0
    mlp_ratio: int = 4

    def validate(self) -> None:
        for name in ("vocab_size", "dim", "n_layers", "n_heads", "max_positions", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.n_heads:
            raise ValueError(f"dim={self.dim} is not divisible by n_heads={self.n_heads}")
        if self.dim % 2:
            raise ValueError("dim must be even for sinusoidal positions")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.float()


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.dim // cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.fc1 = nn.Linear(cfg.dim, cfg.mlp_ratio * cfg.dim)
        self.fc2 = nn.Linear(cfg.mlp_ratio * cfg.dim, cfg.dim)

    def forward(self, x, past_kv=None, attn_mask=None):
        # x: (B, T, D); past_kv: (k, v) each (B, H, S, hd) prepended to the keys/values
        B, T, D = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(B, T, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if past_kv is not None:
            k_all = torch.cat([past_kv[0], k], dim=2)
            v_all = torch.cat([past_kv[1], v], dim=2)
        else:
            k_all, v_all = k, v
        a = F.scaled_dot_product_attention(q, k_all, v_all, attn_mask=attn_mask)
        x = x + self.proj(a.transpose(1, 2).reshape(B, T, D))
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x, (k, v)


class DiffusionTransformer(nn.Module):
    """Parameter container and forward passes. Build through :func:`init_params`."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size)
        self.register_buffer("pos_table", sinusoidal_positions(cfg.max_positions, cfg.dim), persistent=False)

    def _embed(self, tokens, offset):
        T = tokens.shape[-1]
        if offset + T > self.config.max_positions:
            raise ValueError(
                f"positions {offset}..{offset + T - 1} exceed max_positions={self.config.max_positions}"
            )
        return self.tok_emb(tokens) + self.pos_table[offset:offset + T].to(self.tok_emb.weight.dtype)

    def forward(self, tokens, attn_mask=None):
        x = self._embed(tokens, 0)
        for blk in self.blocks:
            x, _ = blk(x, attn_mask=attn_mask)
        return self.head(self.ln_f(x))

    def forward_with_prefix(self, tokens, cache: "PrefixCache"):
        x = self._embed(tokens, cache.length)
        rows = []
        for layer, blk in enumerate(self.blocks):
            past = None
            if cache.length:
                past = (cache.keys[layer][None], cache.values[layer][None])
            x, (k, v) = blk(x, past_kv=past)
            rows.append((k[0], v[0]))
        return self.head(self.ln_f(x)), rows

    def forward_prefilled(self, tokens, prefix_len: int):
        """Logits for (B, T) tokens whose first ``prefix_len`` positions were encoded alone.

        The prefix attends only to itself, as a prompt prefill does at decode
        time; the remaining positions read its keys/values and attend to each
        other. Two passes, no attention mask.
        """
        prefix = self._embed(tokens[:, :prefix_len], 0)
        rest = self._embed(tokens[:, prefix_len:], prefix_len)
        for blk in self.blocks:
            prefix, kv = blk(prefix)
            rest, _ = blk(rest, past_kv=kv)
        return self.head(self.ln_f(torch.cat([prefix, rest], dim=1)))


@dataclass(frozen=True)
class PrefixCache:
    """Per-layer keys/values of shape (n_heads, length, head_dim)."""

    keys: tuple = field(default_factory=tuple)
    values: tuple = field(default_factory=tuple)

    @property
    def length(self) -> int:
        return 0 if not self.keys else self.keys[0].shape[1]

    @classmethod
    def empty(cls) -> "PrefixCache":
        return cls()


def init_params(config: ModelConfig) -> DiffusionTransformer:
    """Deterministic scaled-Gaussian initialization.

    Linear weights ~ N(0, 1/fan_in); the two residual output projections of
    every block are further scaled by 1/sqrt(2 * n_layers). Token embeddings
    ~ N(0, 1) so they sit at the same scale as the unit-amplitude sinusoids.
    Biases start at zero and LayerNorm gains at one. Parameters are drawn in
    ``named_parameters`` order from a generator seeded with ``config.seed``.
    """
    config.validate()
    model = DiffusionTransformer(config)
    gen = torch.Generator().manual_seed(config.seed)
    residual_scale = 1.0 / math.sqrt(2 * config.n_layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln_"):
                p.fill_(1.0)
            elif name == "tok_emb.weight":
                p.copy_(torch.randn(p.shape, generator=gen))
            else:
                std = 1.0 / math.sqrt(p.shape[1])
                if name.endswith(("proj.weight", "fc2.weight")):
                    std *= residual_scale
                p.copy_(torch.randn(p.shape, generator=gen) * std)
    return model


def forward_full(tokens: torch.Tensor, params: DiffusionTransformer) -> torch.Tensor:
    """Logits for every position of ``tokens`` ((T,) or (B, T)) under full attention."""
    squeeze = tokens.dim() == 1
    if squeeze:
        tokens = tokens[None]
    logits = params(tokens)
    return logits[0] if squeeze else logits


def forward_cached(active: torch.Tensor, cache: PrefixCache, params: DiffusionTransformer):
    """Run ``active`` (T,) at positions following the cache.

    Active positions attend to the cached prefix and to each other; the cached
    rows are read as-is. Returns ``(logits (T, V), rows)`` where ``rows`` holds
    one ``(k, v)`` pair per layer for the active positions, ready for
    :func:`extend_cache`.
    """
    logits, rows = params.forward_with_prefix(active[None], cache)
    return logits[0], rows


def extend_cache(cache: PrefixCache, block_kv) -> PrefixCache:
    if not cache.length:
        return PrefixCache(tuple(k for k, _ in block_kv), tuple(v for _, v in block_kv))
    keys = tuple(torch.cat([old, new], dim=1) for old, (new, _) in zip(cache.keys, block_kv))
    values = tuple(torch.cat([old, new], dim=1) for old, (_, new) in zip(cache.values, block_kv))
    return PrefixCache(keys, values)


def segment_attention_mask(lengths) -> torch.Tensor:
    """Boolean (T, T) mask: segment i sees segments 0..i, bidirectionally within each."""
    seg = torch.repeat_interleave(torch.arange(len(lengths)), torch.as_tensor(lengths))
    return seg[:, None] >= seg[None, :]


def frozen_prefix_forward(segments, params: DiffusionTransformer) -> torch.Tensor:
    """Cache-free reference for :func:`forward_cached`.

    ``segments`` is ``[prompt, block_1, ..., block_k, active]``, each a 1-D
    token tensor holding exactly the tokens that segment had when it was
    frozen. Each segment attends to itself and to earlier segments only, which
    is what the prompt prefill and every cache extension saw. Returns logits
    for all positions.
    """
    tokens = torch.cat(list(segments))
    mask = segment_attention_mask([len(s) for s in segments])
    return params(tokens[None], attn_mask=mask)[0]


LOSS_WEIGHTINGS = ("inv_t", "uniform")


def masked_diffusion_loss(logits, x_0, mask, t, weighting="inv_t", t_floor=0.0):
    """Per-row loss: mean cross-entropy over masked positions times w(t).

    ``w(t) = 1 / max(t, t_floor)`` for ``"inv_t"`` and 1 for ``"uniform"``.
    Rows without masked positions contribute exactly zero.
    """
    if weighting not in LOSS_WEIGHTINGS:
        raise ValueError(f"unknown loss weighting {weighting!r}")
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), x_0.reshape(-1), reduction="none")
    ce = ce.view(x_0.shape) * mask
    count = mask.sum(-1)
    per_row = ce.sum(-1) / count.clamp(min=1)
    if weighting == "inv_t":
        per_row = per_row / t.clamp(min=max(t_floor, 1e-12))
    return per_row


def batch_logits(params: DiffusionTransformer, x_t: torch.Tensor, prefill=None) -> torch.Tensor:
    """Logits for a training batch. ``prefill[b] > 0`` runs row b through
    :meth:`DiffusionTransformer.forward_prefilled` with that prefix length."""
    if prefill is None or not any(prefill):
        return params(x_t)
    prefill = [int(n) for n in prefill]
    order, pieces = [], []
    for n in sorted(set(prefill)):
        rows = [b for b, m in enumerate(prefill) if m == n]
        order += rows
        pieces.append(params(x_t[rows]) if n == 0 else params.forward_prefilled(x_t[rows], n))
    inverse = torch.argsort(torch.as_tensor(order))
    return torch.cat(pieces)[inverse]


def loss_and_gradients(batch: NoisedBatch, params: DiffusionTransformer, weighting="inv_t", t_floor=0.0):
    """Mean over rows of :func:`masked_diffusion_loss` and its exact gradients.

    Gradients come back as a dict keyed like ``named_parameters``. A batch with
    no masked position yields a zero loss and all-zero gradients.
    """
    x_t, x_0, mask, t = batch.as_tensors()
    params.zero_grad(set_to_none=True)
    dtype = params.head.weight.dtype
    if not mask.any():
        grads = {n: torch.zeros_like(p) for n, p in params.named_parameters()}
        return torch.zeros((), dtype=dtype), grads
    logits = batch_logits(params, x_t, batch.prefill)
    per_row = masked_diffusion_loss(logits, x_0, mask.to(dtype), t.to(dtype), weighting, t_floor)
    loss = per_row.mean()
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in params.named_parameters()}
    return loss.detach(), grads
