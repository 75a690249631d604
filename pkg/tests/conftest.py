import numpy as np
import pytest
import torch

from varlen_dlm.model import ModelConfig, init_params
from varlen_dlm.tokenizer import CharTokenizer


@pytest.fixture
def tok():
    return CharTokenizer("0123456789+=CR")


@pytest.fixture
def specials(tok):
    return tok.specials


@pytest.fixture
def small_model(tok):
    torch.manual_seed(0)
    model = init_params(ModelConfig(vocab_size=tok.vocab_size, dim=16, n_layers=2, n_heads=2, max_positions=512, seed=3))
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def no_eos(model, eos_id):
    """Push EOS out of reach so a random model always runs to max_blocks."""
    with torch.no_grad():
        model.head.bias[eos_id] = -50.0
    return model


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
