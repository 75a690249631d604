"""Autograd gradients against central finite differences, in float64."""
import numpy as np
import torch

from varlen_dlm.masking import NoisedBatch
from varlen_dlm.model import ModelConfig, init_params, loss_and_gradients, masked_diffusion_loss

STEP = 1e-5
# Denominator floor for the relative error. Coordinates whose true gradient is
# exactly zero (key biases, by softmax shift invariance) are only resolved to
# round-off, eps * |loss| / STEP ~ 1e-9; this keeps that noise from posing as error.
FLOOR = 1e-5


def tiny_model(seed=0):
    cfg = ModelConfig(vocab_size=8, dim=8, n_layers=1, n_heads=2, max_positions=32, mlp_ratio=2, seed=seed)
    model = init_params(cfg).double()
    assert sum(p.numel() for p in model.parameters()) <= 1000
    return model


def random_batch(rng, vocab=8, B=2, L=10):
    x0 = rng.integers(0, vocab - 3, (B, L))
    mask = rng.random((B, L)) < rng.uniform(0.2, 0.9)
    mask[:, rng.integers(L)] = True
    t = rng.uniform(0.05, 1.0, B)
    return NoisedBatch(x_t=np.where(mask, vocab - 3, x0), x_0=x0, mask=mask, t=t)


def loss_value(model, batch, weighting):
    x_t, x_0, mask, t = batch.as_tensors()
    with torch.no_grad():
        return masked_diffusion_loss(model(x_t), x_0, mask.double(), t, weighting).mean().item()


def max_relative_error(model, batch, weighting="inv_t"):
    _, grads = loss_and_gradients(batch, model, weighting)
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            g = grads[name].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + STEP
                up = loss_value(model, batch, weighting)
                flat[i] = orig - STEP
                down = loss_value(model, batch, weighting)
                flat[i] = orig
                fd = (up - down) / (2 * STEP)
                err = abs(fd - g[i].item()) / max(abs(fd), abs(g[i].item()), FLOOR)
                worst = max(worst, err)
    return worst


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    model = tiny_model()
    for weighting in ("inv_t", "uniform"):
        assert max_relative_error(model, random_batch(rng), weighting) <= 1e-4
