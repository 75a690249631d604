"""Command line entry point: ``varlen-dlm <subcommand>``.

Every subcommand takes ``--config FILE`` (JSON or YAML); keys in that file
become flag defaults, using the flag's dest name (``block_size``,
``learning_rate`` ...). Explicit flags still win.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import corpus as corpus_mod
from .bench import eos_diagnostics, run_bench
from .checkpoint import load_checkpoint
from .inference import DecodeConfig, cache_divergence_probe, generate_fixed, generate_variable
from .masking import Role
from .model import ModelConfig
from .packing import pack_samples
from .tokenizer import CharTokenizer, build_tokenizer
from .training import TrainConfig, Trainer

log = logging.getLogger("varlen_dlm")


class InvariantViolation(RuntimeError):
    pass


def _emit(obj, fh=None) -> None:
    print(json.dumps(obj, sort_keys=True), file=fh or sys.stdout, flush=True)


def _load_model(path):
    ckpt = load_checkpoint(path)
    if "tokenizer" not in ckpt.metadata:
        raise SystemExit(f"{path}: checkpoint carries no tokenizer")
    tok = CharTokenizer.from_json(ckpt.metadata["tokenizer"])
    if tok.vocab_size != ckpt.config.vocab_size:
        raise SystemExit(f"{path}: tokenizer has {tok.vocab_size} ids but the model expects {ckpt.config.vocab_size}")
    model = ckpt.build_model()
    model.eval()
    return model, tok, ckpt


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(
        block_size=args.block_size,
        confidence_threshold=args.threshold,
        max_blocks=args.max_blocks,
        greedy=not args.sample,
        temperature=args.temperature,
        seed=args.seed,
        eager_eos=args.eager_eos,
    )


def _heldout(path, fraction, limit=None):
    records = corpus_mod.read_jsonl(path)
    _, held = corpus_mod.split_records(records, fraction)
    return held[:limit] if limit else held


def cmd_gen_corpus(args) -> int:
    spec = corpus_mod.SyntheticTaskSpec(
        kinds=tuple(args.tasks.split(",")),
        min_len=args.min_len,
        max_len=args.max_len,
        max_operand=args.max_operand,
        alphabet=args.alphabet,
        count=args.count,
    )
    records = corpus_mod.gen_corpus(spec, args.seed)
    corpus_mod.write_jsonl(records, args.out)
    _emit({"records": len(records), "out": str(args.out)})
    return 0


def cmd_pack_stats(args) -> int:
    records = corpus_mod.read_jsonl(args.data)
    tok = build_tokenizer(records)
    result = pack_samples(corpus_mod.to_pairs(records, tok), args.L, tok.specials)
    for row in result.rows:
        if (row.roles == Role.EOS_SEPARATOR).sum() != row.n_pairs:
            raise InvariantViolation("separator count differs from pair count")
    _emit({"L": args.L, **result.stats()})
    return 0


def cmd_train(args) -> int:
    records = corpus_mod.read_jsonl(args.data)
    train_records, _ = corpus_mod.split_records(records, args.heldout_fraction)
    tok = build_tokenizer(records)
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        warmup_steps=args.warmup_steps,
        total_steps=args.total_steps,
        batch_size=args.batch_size,
        L=args.L,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        epochs=args.epochs,
        loss_weighting=args.loss_weighting,
        t_floor=args.t_floor,
        tail_fill=args.tail_fill,
        row_close_prob=args.row_close_prob,
        prefill_prob=args.prefill_prob,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = corpus_mod.to_pairs(train_records, tok)
    if args.resume:
        trainer = Trainer.resume(args.resume, pairs, cfg, tok.specials)
    else:
        mcfg = ModelConfig(vocab_size=tok.vocab_size, dim=args.dim, n_layers=args.n_layers, n_heads=args.n_heads,
                           max_positions=args.max_positions, seed=args.seed)
        trainer = Trainer.from_scratch(mcfg, pairs, cfg, tok.specials, metadata={"tokenizer": tok.to_json()})
    deadline = time.monotonic() + args.max_minutes * 60 if args.max_minutes else None
    with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
        def on_record(rec):
            fh.write(rec.to_json() + "\n")
            if rec.step % args.log_every == 0:
                print(rec.to_json(), flush=True)
            if deadline is not None and time.monotonic() > deadline:
                raise KeyboardInterrupt
        try:
            trainer.run(on_record=on_record, out_dir=out)
        except KeyboardInterrupt:
            log.warning("stopped at step %d", trainer.step)
    trainer.save(out / "final.ckpt")
    _emit({"step": trainer.step, "checkpoint": str(out / "final.ckpt")})
    return 0


def cmd_generate(args) -> int:
    model, tok, _ = _load_model(args.checkpoint)
    text = Path(args.prompt_file).read_text().strip() if args.prompt_file else args.prompt
    if text is None:
        raise SystemExit("give --prompt or --prompt-file")
    cfg = _decode_config(args)
    prompt = tok.encode(text)
    if args.engine == "variable":
        res = generate_variable(prompt, model, cfg, tok.specials)
    else:
        res = generate_fixed(prompt, model, cfg, tok.specials, args.quota)
    print(tok.decode(res.tokens))
    _emit({"engine": args.engine, **res.metrics()})
    if any(t in tok.specials.as_set() for t in res.tokens):
        raise InvariantViolation("generated tokens contain a reserved id")
    return 0


def cmd_bench(args) -> int:
    model, tok, _ = _load_model(args.checkpoint)
    records = _heldout(args.data, args.heldout_fraction, args.limit)
    quotas = [int(q) for q in args.quotas.split(",")] if args.quotas else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench_records.jsonl", "w", encoding="utf-8") as fh:
        recs, summary = run_bench(model, tok, records, _decode_config(args), quotas, repeats=args.repeats,
                                  on_record=lambda r: _emit(r.to_dict(), fh))
    (out / "bench_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _emit(summary)
    return 0


def cmd_diagnose(args) -> int:
    model, tok, _ = _load_model(args.checkpoint)
    records = _heldout(args.data, args.heldout_fraction, args.limit)
    report = eos_diagnostics(model, tok, records, _decode_config(args))
    _emit(report)
    return 0


def cmd_probe_cache(args) -> int:
    model, tok, _ = _load_model(args.checkpoint)
    report = cache_divergence_probe(tok.encode(args.prompt), model, _decode_config(args), tok.specials)
    _emit(report)
    if report["oracle_max_abs_diff"] > args.tolerance:
        raise InvariantViolation(f"cached logits diverge from the frozen-prefix reference by "
                                 f"{report['oracle_max_abs_diff']:.3g}")
    return 0


def _add_decode_flags(p) -> None:
    p.add_argument("--block-size", dest="block_size", type=int, default=64)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--max-blocks", dest="max_blocks", type=int, default=16)
    p.add_argument("--sample", action="store_true", help="sample instead of argmax")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--eager-eos", dest="eager_eos", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varlen-dlm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON or YAML file of flag defaults")
        p.set_defaults(func=fn)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "write a synthetic JSONL task corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", default="copy,addition")
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--min-len", dest="min_len", type=int, default=5)
    p.add_argument("--max-len", dest="max_len", type=int, default=40)
    p.add_argument("--max-operand", dest="max_operand", type=int, default=999)
    p.add_argument("--alphabet", default=corpus_mod.DIGITS)
    p.add_argument("--seed", type=int, default=0)

    p = add("pack-stats", cmd_pack_stats, "pack a corpus and report row statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--L", type=int, default=256)

    p = add("train", cmd_train, "fine-tune a fresh model on packed, masked rows")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    d = TrainConfig()
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=d.learning_rate)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=d.warmup_steps)
    p.add_argument("--total-steps", dest="total_steps", type=int, default=d.total_steps)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=d.batch_size)
    p.add_argument("--L", type=int, default=d.L)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=d.checkpoint_every)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--loss-weighting", dest="loss_weighting", choices=("inv_t", "uniform"), default=d.loss_weighting)
    p.add_argument("--t-floor", dest="t_floor", type=float, default=d.t_floor)
    p.add_argument("--tail-fill", dest="tail_fill", choices=("mask", "pad"), default=d.tail_fill)
    p.add_argument("--row-close-prob", dest="row_close_prob", type=float, default=d.row_close_prob,
                   help="chance of closing a packed row after each pair")
    p.add_argument("--prefill-prob", dest="prefill_prob", type=float, default=d.prefill_prob,
                   help="chance that a row's first prompt is encoded alone, as in decode-time prefill")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--n-layers", dest="n_layers", type=int, default=2)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=4)
    p.add_argument("--max-positions", dest="max_positions", type=int, default=2048)
    p.add_argument("--heldout-fraction", dest="heldout_fraction", type=float, default=0.1)
    p.add_argument("--max-minutes", dest="max_minutes", type=float, default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=50)

    p = add("generate", cmd_generate, "decode one prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt")
    p.add_argument("--prompt-file", dest="prompt_file")
    p.add_argument("--engine", choices=("variable", "fixed"), default="variable")
    p.add_argument("--quota", type=int, default=1024)
    _add_decode_flags(p)

    p = add("bench", cmd_bench, "compare variable decoding against fixed quotas")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quotas", default="16,32,64,1024")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--heldout-fraction", dest="heldout_fraction", type=float, default=0.1)
    _add_decode_flags(p)

    p = add("diagnose", cmd_diagnose, "missed / premature EOS rates on held-out tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--heldout-fraction", dest="heldout_fraction", type=float, default=0.1)
    _add_decode_flags(p)

    p = add("probe-cache", cmd_probe_cache, "compare cached logits with cache-free recomputation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--tolerance", type=float, default=1e-5)
    _add_decode_flags(p)
    return parser


def _read_config(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**_read_config(args.config))
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        with torch.set_grad_enabled(args.command == "train"):
            return args.func(args)
    except InvariantViolation as exc:
        log.error("invariant violated: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
