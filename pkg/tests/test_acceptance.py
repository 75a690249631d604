"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Criteria 6-8 share a desk model trained once per recipe (at most 30 minutes on
one core) and cached under ``.cache/acceptance``; delete that directory to
force a retrain.
"""
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, no_eos
from test_gradcheck import max_relative_error, random_batch, tiny_model
from varlen_dlm import cli
from varlen_dlm import model as model_mod
from varlen_dlm.bench import eos_diagnostics, run_bench
from varlen_dlm.inference import DecodeConfig, cache_divergence_probe, generate_variable
from varlen_dlm.masking import Role, apply_forward_masking
from varlen_dlm.model import ModelConfig, init_params
from varlen_dlm.packing import DialoguePair, extract_pairs, pack_samples
from varlen_dlm.tokenizer import CharTokenizer
from varlen_dlm.toys import AnswerOracle, ConstantModel


def report(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def test_criterion_1_masking_law():
    t0 = time.perf_counter()
    mask_id, eos_id = 20, 21
    n_pairs, n_resp = 1000, 50
    one = [Role.PROMPT] * 4 + [Role.RESPONSE] * n_resp + [Role.EOS_SEPARATOR]
    roles = np.array(one * n_pairs)
    x = np.where(roles == Role.EOS_SEPARATOR, eos_id, np.where(roles == Role.PROMPT, 3, 7))
    nb = apply_forward_masking(x, roles, 0.3, np.random.default_rng(2024), mask_id=mask_id, eos_id=eos_id)
    resp = nb.mask[roles == Role.RESPONSE]
    eos = nb.mask[roles == Role.EOS_SEPARATOR].mean()
    prompt = nb.mask[roles == Role.PROMPT].mean()
    elapsed = time.perf_counter() - t0
    ok = resp.size == 50_000 and abs(resp.mean() - 0.3) <= 0.01 and eos == 1.0 and prompt == 0.0 and elapsed < 10
    report(1, ok, f"response rate {resp.mean():.4f} over {resp.size}, eos {eos}, prompt {prompt}, {elapsed:.2f}s")


def test_criterion_2_packing_validator(monkeypatch):
    t0 = time.perf_counter()
    specials = CharTokenizer("0123456789").specials
    rng = np.random.default_rng(11)
    pairs = [DialoguePair(rng.integers(0, 10, rng.integers(1, 60)), rng.integers(0, 10, rng.integers(1, 60)))
             for _ in range(4000)]
    res = pack_samples(pairs, 256, specials)
    rows = res.rows[:1000]
    sep_ok = all((r.roles == Role.EOS_SEPARATOR).sum() == r.n_pairs for r in rows)
    no_eos_in_resp = all(not np.any(r.tokens[r.roles == Role.RESPONSE] == specials.eos) for r in rows)
    kept = [p for p in pairs if len(p) <= 256]
    round_trip = [p for r in res.rows for p in extract_pairs(r)] == kept
    metadata_free = all(set(vars(r)) == {"tokens", "roles", "pair_boundaries"} for r in rows)

    from varlen_dlm.training import TrainConfig, Trainer

    # spy on the attention kernel itself, with the desk recipe's row knobs on
    seen = []
    real = model_mod.F.scaled_dot_product_attention
    monkeypatch.setattr(model_mod.F, "scaled_dot_product_attention",
                        lambda q, k, v, attn_mask=None, **kw: seen.append(attn_mask) or real(q, k, v, attn_mask, **kw))
    cfg = TrainConfig(batch_size=4, L=256, total_steps=3, warmup_steps=1, row_close_prob=0.5, prefill_prob=0.5)
    mcfg = ModelConfig(vocab_size=13, dim=16, n_layers=1, n_heads=2, max_positions=256)
    Trainer.from_scratch(mcfg, pairs[:200], cfg, specials).run()
    no_masks = len(seen) >= 3 and all(m is None for m in seen)
    elapsed = time.perf_counter() - t0
    ok = len(rows) == 1000 and sep_ok and no_eos_in_resp and round_trip and metadata_free and no_masks and elapsed < 10
    report(2, ok, f"{len(rows)} rows, separators ok={sep_ok}, round trip={round_trip}, "
                  f"no attention masks={no_masks and metadata_free}, {elapsed:.2f}s")


def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    model = tiny_model()
    n_params = sum(p.numel() for p in model.parameters())
    worst = max(max_relative_error(model, random_batch(rng), ("inv_t", "uniform")[i % 2]) for i in range(20))
    elapsed = time.perf_counter() - t0
    report(3, worst <= 1e-4 and n_params <= 1000 and elapsed < 120,
           f"max relative error {worst:.2e} over 20 batches, {n_params} params, {elapsed:.1f}s")


def test_criterion_4_cache_correctness():
    t0 = time.perf_counter()
    tok = CharTokenizer("0123456789+=CR")
    worst, paths, blocks = 0.0, True, []
    for seed in range(10):
        model = init_params(ModelConfig(vocab_size=tok.vocab_size, dim=32, n_layers=2, n_heads=4,
                                        max_positions=256, seed=seed))
        model.eval()
        no_eos(model, tok.eos_id)
        digits = np.random.default_rng(seed).integers(0, 10, 6)
        prompt = tok.encode("C" + "".join(map(str, digits)) + "=")
        cfg = DecodeConfig(block_size=16, max_blocks=3, confidence_threshold=0.3)
        r = cache_divergence_probe(prompt, model, cfg, tok.specials)
        worst = max(worst, r["oracle_max_abs_diff"])
        paths &= r["same_path"]
        blocks.append(r["blocks"])
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and paths and all(b == 3 for b in blocks) and elapsed < 120
    report(4, ok, f"max |cached - reference| logit {worst:.2e} over 10 seeds x 3 blocks, {elapsed:.1f}s")


def test_criterion_5_termination_semantics():
    tok = CharTokenizer("0123456789+=C")
    prompt = tok.encode("C12=")
    first = generate_variable(prompt, ConstantModel(tok.vocab_size, tok.eos_id, confidence=1.0),
                              DecodeConfig(block_size=8), tok.specials)
    a = first.blocks == 1 and first.stop_reason == "eos" and first.tokens == []
    never = generate_variable(prompt, ConstantModel(tok.vocab_size, tok.encode("5")[0], confidence=0.99),
                              DecodeConfig(block_size=8, max_blocks=4), tok.specials)
    b = never.stop_reason == "max_blocks" and never.blocks == 4 and len(never.tokens) == 32
    eq = tok.encode("=")[0]
    oracle = AnswerOracle(tok.vocab_size, lambda p: [p[1]] * 20, prompt_end=eq, eos_id=tok.eos_id, confidence=0.95)
    slow = generate_variable(prompt, oracle, DecodeConfig(block_size=8, confidence_threshold=1.0), tok.specials)
    c = slow.blocks == 3 and slow.steps == 3 * 8 and len(slow.tokens) == 20
    report(5, a and b and c, f"(a) blocks={first.blocks} (b) stop={never.stop_reason} blocks={never.blocks} "
                             f"(c) steps={slow.steps} for {slow.blocks} blocks of 8")


# ---------------------------------------------------------------------------
# Criteria 6-8: the trained desk model.

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = [ROOT / "configs" / "desk-corpus.yaml", ROOT / "configs" / "desk-train.yaml"]
EVAL_N = 300          # held-out records for accuracy comparisons
WIDE_N = 20           # held-out records also decoded at quota 1024 (about 20 s each)
DECODE = DecodeConfig(block_size=64, confidence_threshold=0.9, max_blocks=16)


@pytest.fixture(scope="session")
def desk():
    key = hashlib.sha256(b"".join(p.read_bytes() for p in CONFIGS)).hexdigest()[:12]
    home = ROOT / ".cache" / "acceptance" / key
    data, ckpt, meta = home / "data.jsonl", home / "run" / "final.ckpt", home / "train_meta.json"
    if not (ckpt.exists() and meta.exists()):
        home.mkdir(parents=True, exist_ok=True)
        assert cli.main(["gen-corpus", "--config", str(CONFIGS[0]), "--out", str(data)]) == 0
        t0 = time.monotonic()
        assert cli.main(["train", "--config", str(CONFIGS[1]), "--data", str(data), "--out", str(home / "run")]) == 0
        meta.write_text(json.dumps({"train_minutes": (time.monotonic() - t0) / 60}))
    model, tok, checkpoint = cli._load_model(ckpt)
    held = cli._heldout(data, 0.1)
    return {
        "model": model,
        "tok": tok,
        "step": checkpoint.step,
        "layers": checkpoint.config.n_layers,
        "minutes": json.loads(meta.read_text())["train_minutes"],
        "held": held,
    }


@pytest.fixture(scope="session")
def sweep(desk):
    records = desk["held"][:EVAL_N]
    recs, summary = run_bench(desk["model"], desk["tok"], records, DECODE, quotas=(4, 8, 16, 32, 64))
    return recs, summary


@pytest.mark.slow
def test_criterion_6_end_to_end_learning(desk, sweep):
    _, summary = sweep
    acc = summary["engines"]["variable"]["accuracy"]
    diag = eos_diagnostics(desk["model"], desk["tok"], desk["held"][:EVAL_N], DECODE)
    ok = (desk["layers"] == 2 and desk["minutes"] <= 30 and acc >= 0.90
          and diag["missed_eos_rate"] <= 0.05 and diag["premature_eos_rate"] <= 0.05)
    report(6, ok, f"exact match {acc:.3f} on {EVAL_N} held-out, missed EOS {diag['missed_eos_rate']:.3f}, "
                  f"premature EOS {diag['premature_eos_rate']:.3f}, {desk['layers']} layers, "
                  f"{desk['step']} steps in {desk['minutes']:.1f} min")


@pytest.mark.slow
def test_criterion_7_variable_vs_fixed_economy(desk, sweep):
    _, summary = sweep
    records = desk["held"][:WIDE_N]
    recs, wide = run_bench(desk["model"], desk["tok"], records, DECODE, quotas=(1024,), repeats=1)
    var, fixed = wide["engines"]["variable"], wide["engines"]["fixed@1024"]
    ratio = wide["ratios"]["positions_computed"]
    mean_len = np.mean([len(r["response"]) for r in desk["held"]])
    acc = summary["engines"]["variable"]["accuracy"]
    best = summary["best_fixed_accuracy"]
    ok = (mean_len <= 64 and var["positions_computed"] < fixed["positions_computed"] and var["steps"] < fixed["steps"]
          and ratio >= 5 and abs(acc - best) <= 0.02)
    report(7, ok, f"positions ratio {ratio:.1f}x, steps {var['steps']} vs {fixed['steps']} on {WIDE_N} records "
                  f"(wall {wide['ratios']['wall_ms']:.1f}x); accuracy {acc:.3f} vs best fixed "
                  f"{best:.3f} @{summary['best_fixed_quota']}; fixed@1024 accuracy {fixed['accuracy']:.3f}")


@pytest.mark.slow
def test_criterion_8_quota_failure(desk, sweep):
    recs, summary = sweep
    acc = {e: v["accuracy"] for e, v in summary["engines"].items()}
    short = [r for r in recs if r.quota is not None and r.quota < r.true_length]
    labelled = all(not r.correct and r.failure == "quota" for r in short)
    _, alt = run_bench(desk["model"], desk["tok"], desk["held"][:EVAL_N], DECODE, quotas=(1,))
    same_variable = alt["engines"]["variable"]["accuracy"] == acc["variable"]
    lengths = [len(r["response"]) for r in desk["held"][:EVAL_N]]
    below = sum(n <= 4 for n in lengths) / len(lengths)
    collapsed = acc["fixed@4"] <= below and acc["fixed@4"] <= 0.5 * acc["variable"]
    ok = labelled and same_variable and collapsed
    report(8, ok, f"fixed@4 {acc['fixed@4']:.3f} (answers <= 4 chars: {below:.3f}), fixed@8 {acc['fixed@8']:.3f}, "
                  f"fixed@64 {acc['fixed@64']:.3f}, variable {acc['variable']:.3f} under both quota sweeps; "
                  f"{len(short)} short-quota records all labelled quota={labelled}")
