"""Variable-vs-fixed benchmark and EOS diagnostics over held-out tasks."""
from __future__ import annotations

import statistics
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .inference import STOP_EOS, STOP_MAX_BLOCKS, DecodeConfig, generate_fixed, generate_variable

VARIABLE = "variable"


@dataclass
class BenchRecord:
    task_id: int
    task: str
    engine: str
    quota: int | None
    correct: bool
    emitted_length: int
    true_length: int
    eos_emitted: bool
    eos_position_error: int | None
    failure: str
    steps: int
    forward_calls: int
    positions_computed: int
    wall_ms: float

    def to_dict(self) -> dict:
        return asdict(self)


def engine_name(quota) -> str:
    return VARIABLE if quota is None else f"fixed@{quota}"


def classify(result, answer, quota=None) -> str:
    """Failure label for one generation; empty string when correct."""
    emitted = result.tokens
    if emitted == answer:
        return ""
    if quota is not None and quota < len(answer):
        return "quota"
    if result.stop_reason != STOP_EOS:
        return "missed_eos"
    if len(emitted) < len(answer):
        return "premature_eos"
    return "wrong"


def _timed(fn, repeats: int):
    results = [fn() for _ in range(max(1, repeats))]
    res = results[0]
    res.wall_ms = statistics.median(r.wall_ms for r in results)
    return res


def evaluate_one(task_id, record, model, tokenizer, config: DecodeConfig, quota=None, repeats=1) -> BenchRecord:
    prompt = tokenizer.encode(record["prompt"])
    answer = tokenizer.encode(record["response"])
    if quota is None:
        res = _timed(lambda: generate_variable(prompt, model, config, tokenizer.specials), repeats)
    else:
        res = _timed(lambda: generate_fixed(prompt, model, config, tokenizer.specials, quota), repeats)
    eos = res.stop_reason == STOP_EOS
    return BenchRecord(
        task_id=task_id,
        task=record.get("task", ""),
        engine=engine_name(quota),
        quota=quota,
        correct=res.tokens == answer,
        emitted_length=len(res.tokens),
        true_length=len(answer),
        eos_emitted=eos,
        eos_position_error=abs(len(res.tokens) - len(answer)) if eos else None,
        failure=classify(res, answer, quota),
        steps=res.steps,
        forward_calls=res.forward_calls,
        positions_computed=res.positions_computed,
        wall_ms=res.wall_ms,
    )


def summarize(records) -> dict:
    """Per-engine accuracy and cost totals plus fixed-at-largest-quota / variable ratios.

    Ratios are computed from the per-record fields alone, so recomputing them
    from a dumped record stream reproduces the summary exactly.
    """
    engines = {}
    for r in records:
        engines.setdefault(r.engine, []).append(r)
    summary = {"engines": {}}
    for name, rs in engines.items():
        errors = [r.eos_position_error for r in rs if r.eos_position_error is not None]
        failures = dict(Counter(r.failure for r in rs if r.failure))
        summary["engines"][name] = {
            "n": len(rs),
            "quota": rs[0].quota,
            "accuracy": sum(r.correct for r in rs) / len(rs),
            "mean_eos_position_error": float(np.mean(errors)) if errors else None,
            "failures": failures,
            "steps": sum(r.steps for r in rs),
            "forward_calls": sum(r.forward_calls for r in rs),
            "positions_computed": sum(r.positions_computed for r in rs),
            "wall_ms": sum(r.wall_ms for r in rs),
            "mean_true_length": float(np.mean([r.true_length for r in rs])),
        }
    fixed = [e for e in summary["engines"].values() if e["quota"] is not None]
    if VARIABLE in summary["engines"] and fixed:
        var = summary["engines"][VARIABLE]
        ref = max(fixed, key=lambda e: e["quota"])
        best = max(fixed, key=lambda e: (e["accuracy"], -e["quota"]))
        summary["reference_quota"] = ref["quota"]
        summary["best_fixed_quota"] = best["quota"]
        summary["best_fixed_accuracy"] = best["accuracy"]
        summary["ratios"] = {
            key: ref[key] / var[key] if var[key] else float("inf")
            for key in ("steps", "positions_computed", "wall_ms")
        }
    return summary


def run_bench(model, tokenizer, records, config: DecodeConfig, quotas=(), repeats=1, include_variable=True,
              on_record=None):
    """Evaluate every record with the variable engine and each fixed quota.

    Returns ``(bench_records, summary)``. Wall-clock per generation is the
    median of ``repeats`` runs after one untimed warm-up generation.
    """
    out = []
    if records:
        generate_variable(tokenizer.encode(records[0]["prompt"]), model, config, tokenizer.specials)
    engines = ([None] if include_variable else []) + list(quotas)
    for quota in engines:
        for i, rec in enumerate(records):
            br = evaluate_one(i, rec, model, tokenizer, config, quota, repeats)
            out.append(br)
            if on_record is not None:
                on_record(br)
    return out, summarize(out)


def eos_diagnostics(model, tokenizer, records, config: DecodeConfig) -> dict:
    """Missed-EOS, premature-EOS and EOS position error under the variable engine."""
    missed = premature = 0
    errors = []
    for i, rec in enumerate(records):
        prompt = tokenizer.encode(rec["prompt"])
        answer = tokenizer.encode(rec["response"])
        res = generate_variable(prompt, model, config, tokenizer.specials)
        if res.stop_reason == STOP_MAX_BLOCKS:
            missed += 1
            continue
        if len(res.tokens) < len(answer):
            premature += 1
        errors.append(abs(len(res.tokens) - len(answer)))
    n = max(len(records), 1)
    hist = Counter(errors)
    return {
        "n": len(records),
        "missed_eos_rate": missed / n,
        "premature_eos_rate": premature / n,
        "missed_or_premature_rate": (missed + premature) / n,
        "eos_position_error": {
            "mean": float(np.mean(errors)) if errors else None,
            "median": float(np.median(errors)) if errors else None,
            "max": int(max(errors)) if errors else None,
            "exact_rate": sum(e == 0 for e in errors) / n,
            "histogram": [[int(e), hist[e]] for e in sorted(hist)],
        },
    }
