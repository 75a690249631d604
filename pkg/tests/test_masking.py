import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from varlen_dlm.masking import Role, apply_forward_masking, sample_noise_level, unmask

MASK, EOS = 20, 21


def layout(n_prompt, n_resp, n_pad=0, pairs=1):
    toks, roles = [], []
    for _ in range(pairs):
        toks += [1] * n_prompt + [2] * n_resp + [EOS]
        roles += [Role.PROMPT] * n_prompt + [Role.RESPONSE] * n_resp + [Role.EOS_SEPARATOR]
    toks += [22] * n_pad
    roles += [Role.PAD] * n_pad
    return np.array(toks), np.array(roles)


def test_noise_level_moments_and_range():
    draws = sample_noise_level(np.random.default_rng(0), size=100_000)
    assert draws.min() >= 0.0 and draws.max() <= 1.0
    assert abs(draws.mean() - 0.5) < 0.01


def test_noise_level_reproducible():
    a = sample_noise_level(np.random.default_rng(9), size=5)
    b = sample_noise_level(np.random.default_rng(9), size=5)
    assert np.array_equal(a, b)
    assert np.isscalar(sample_noise_level(np.random.default_rng(9)))


def test_t_zero_masks_only_eos(rng):
    x, roles = layout(4, 6, 3, pairs=2)
    nb = apply_forward_masking(x, roles, 0.0, rng, mask_id=MASK, eos_id=EOS)
    assert np.array_equal(nb.mask, roles == Role.EOS_SEPARATOR)


def test_t_one_masks_all_response_and_eos(rng):
    x, roles = layout(4, 6, 3, pairs=2)
    nb = apply_forward_masking(x, roles, 1.0, rng, mask_id=MASK, eos_id=EOS)
    assert np.array_equal(nb.mask, (roles == Role.RESPONSE) | (roles == Role.EOS_SEPARATOR))
    assert np.array_equal(nb.x_t[roles == Role.PROMPT], x[roles == Role.PROMPT])


def test_rates_at_t_03(rng):
    x, roles = layout(3, 50, 0, pairs=1000)
    nb = apply_forward_masking(x, roles, 0.3, rng, mask_id=MASK, eos_id=EOS)
    assert abs(nb.mask[roles == Role.RESPONSE].mean() - 0.3) < 0.01
    assert nb.mask[roles == Role.EOS_SEPARATOR].mean() == 1.0
    assert nb.mask[roles == Role.PROMPT].mean() == 0.0


def test_response_masks_pairwise_independent():
    rng = np.random.default_rng(7)
    x, roles = layout(2, 2, 0, pairs=1)
    x = np.tile(x, (50_000, 1))
    roles = np.tile(roles, (50_000, 1))
    nb = apply_forward_masking(x, roles, 0.3, rng, mask_id=MASK, eos_id=EOS)
    a, b = nb.mask[:, 2], nb.mask[:, 3]
    table = np.array([[np.sum(a & b), np.sum(a & ~b)], [np.sum(~a & b), np.sum(~a & ~b)]])
    assert stats.chi2_contingency(table).pvalue > 0.001


def test_per_row_noise_levels(rng):
    x, roles = layout(2, 200, 0)
    nb = apply_forward_masking(np.stack([x, x]), np.stack([roles, roles]), np.array([0.0, 1.0]), rng,
                               mask_id=MASK, eos_id=EOS)
    resp = roles == Role.RESPONSE
    assert not nb.mask[0, resp].any() and nb.mask[1, resp].all()
    assert nb.t.tolist() == [0.0, 1.0]


def test_role_length_mismatch(rng):
    x, roles = layout(2, 2)
    with pytest.raises(ValueError, match="shape"):
        apply_forward_masking(x, roles[:-1], 0.5, rng, mask_id=MASK, eos_id=EOS)


def test_eos_inside_response_rejected(rng):
    x, roles = layout(2, 3)
    x[3] = EOS
    with pytest.raises(ValueError, match="EOS"):
        apply_forward_masking(x, roles, 0.5, rng, mask_id=MASK, eos_id=EOS)


@settings(max_examples=60, deadline=None)
@given(
    n_prompt=st.integers(1, 8),
    n_resp=st.integers(1, 8),
    n_pad=st.integers(0, 5),
    pairs=st.integers(1, 4),
    t=st.floats(0.0, 1.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_masking_invariants(n_prompt, n_resp, n_pad, pairs, t, seed):
    x, roles = layout(n_prompt, n_resp, n_pad, pairs)
    nb = apply_forward_masking(x, roles, t, np.random.default_rng(seed), mask_id=MASK, eos_id=EOS)
    assert np.all(nb.x_t[nb.mask] == MASK)
    assert np.array_equal(nb.x_t[~nb.mask], x[~nb.mask])
    assert not nb.mask[(roles == Role.PROMPT) | (roles == Role.PAD)].any()
    assert nb.mask[x == EOS].all()
    assert np.array_equal(unmask(nb.x_t, nb.mask, nb.x_0), x)
