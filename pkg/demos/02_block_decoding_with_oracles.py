"""
Block decoding, step by step
============================

A hand-built model that always knows the answer makes the decoder's
bookkeeping visible: how many blocks it opens, how many denoising steps each
takes, and what a fixed generation budget costs by comparison.
"""
from varlen_dlm.inference import (
    DecodeConfig,
    decode_block_step,
    generate_fixed,
    generate_variable,
    start_generation,
)
from varlen_dlm.tokenizer import CharTokenizer
from varlen_dlm.toys import task_oracle

tok = CharTokenizer("0123456789+=C")
oracle = task_oracle(tok, confidence=0.95)
prompt = tok.encode("C31415926535897932384=")

# Threshold 0.9: every position the oracle is sure of lands in one step.
fast = generate_variable(prompt, oracle, DecodeConfig(block_size=8), tok.specials)
print("answer:", tok.decode(fast.tokens))
print(fast.metrics())

# Threshold 1.0 never fires, so the fallback commits one position per step.
slow = generate_variable(prompt, oracle, DecodeConfig(block_size=8, confidence_threshold=1.0), tok.specials)
print("one-at-a-time steps:", slow.steps, "=", slow.blocks, "blocks x 8")

# %%
# Watch one block fill in.
state = start_generation(tok.encode("C2718="), oracle, DecodeConfig(block_size=8, confidence_threshold=1.0),
                         tok.specials)
while state.masked.any():
    decode_block_step(state, oracle, DecodeConfig(block_size=8, confidence_threshold=1.0), tok.specials)
    print(f"step {state.steps}:", tok.decode(state.block).replace("<mask>", "#").replace("<eos>", "|"))

# %%
# The fixed engine spends its whole quota on every step.
for quota in (8, 32, 256):
    res = generate_fixed(prompt, oracle, DecodeConfig(), tok.specials, quota)
    print(f"quota {quota:>4}: {tok.decode(res.tokens)!r:>24}  stop={res.stop_reason:<5} "
          f"positions={res.positions_computed}")
print(f"variable: positions={fast.positions_computed}")
