"""Forward noising: prompts stay clean, EOS is always masked, responses at rate t."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import torch


class Role(IntEnum):
    PROMPT = 0
    RESPONSE = 1
    EOS_SEPARATOR = 2
    PAD = 3


@dataclass
class NoisedBatch:
    x_t: np.ndarray
    x_0: np.ndarray
    mask: np.ndarray
    t: np.ndarray
    prefill: np.ndarray | None = None  # per-row prompt-prefill length, 0 = full attention

    def as_tensors(self):
        return (
            torch.as_tensor(self.x_t, dtype=torch.long),
            torch.as_tensor(self.x_0, dtype=torch.long),
            torch.as_tensor(self.mask, dtype=torch.bool),
            torch.as_tensor(self.t, dtype=torch.float64),
        )

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())


def sample_noise_level(rng: np.random.Generator, size=None):
    """t ~ U[0, 1); a scalar when ``size`` is None."""
    return rng.random(size)


def check_roles(x_0, roles, eos_id) -> None:
    x_0 = np.asarray(x_0)
    roles = np.asarray(roles)
    if x_0.shape != roles.shape:
        raise ValueError(f"role map shape {roles.shape} does not match tokens {x_0.shape}")
    is_eos = x_0 == eos_id
    if np.any(is_eos != (roles == Role.EOS_SEPARATOR)):
        raise ValueError("EOS tokens must sit exactly on eos_separator positions")


def apply_forward_masking(x_0, roles, t, rng: np.random.Generator, *, mask_id: int, eos_id: int) -> NoisedBatch:
    """Mask response tokens independently with probability ``t``.

    EOS separators are masked with probability 1, prompt and pad positions with
    probability 0. ``x_0`` is (L,) or (B, L); ``t`` is a scalar or one value
    per row.
    """
    x_0 = np.asarray(x_0)
    roles = np.asarray(roles)
    check_roles(x_0, roles, eos_id)
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("noise level must lie in [0, 1]")
    t_b = t[..., None] if x_0.ndim == 2 and t.ndim == 1 else t
    draws = rng.random(x_0.shape)
    mask = ((draws < t_b) & (roles == Role.RESPONSE)) | (roles == Role.EOS_SEPARATOR)
    x_t = np.where(mask, mask_id, x_0)
    return NoisedBatch(x_t=x_t, x_0=x_0.copy(), mask=mask, t=np.broadcast_to(t, x_0.shape[:-1]).copy())


def unmask(x_t, mask, x_0):
    return np.where(mask, x_0, x_t)
