"""
Packing dialogue pairs and corrupting them
==========================================

Several prompt/response pairs share one training row. Every response ends
in an EOS separator, and that separator is always hidden from the model, so
it must learn where each answer stops.
"""
import numpy as np

from varlen_dlm.corpus import SyntheticTaskSpec, gen_corpus, to_pairs
from varlen_dlm.masking import Role, apply_forward_masking
from varlen_dlm.packing import extract_pairs, pack_samples
from varlen_dlm.tokenizer import build_tokenizer

records = gen_corpus(SyntheticTaskSpec(min_len=3, max_len=8, max_operand=99, count=12), seed=1)
for r in records[:4]:
    print(f"{r['task']:>8}  {r['prompt']!r:>14} -> {r['response']!r}")

tok = build_tokenizer(records)
print("vocabulary:", tok.chars, "| MASK/EOS/PAD ids:", tok.mask_id, tok.eos_id, tok.pad_id)

# pack into rows of 48 positions; leftover space is PAD
packed = pack_samples(to_pairs(records, tok), L=48, specials=tok.specials)
print(packed.stats())

row = packed.rows[0]
glyph = {Role.PROMPT: "p", Role.RESPONSE: "r", Role.EOS_SEPARATOR: "E", Role.PAD: "."}
print(tok.decode(row.tokens).replace("<eos>", "|").replace("<pad>", "_"))
print("".join(glyph[Role(r)] for r in row.roles))

# nothing is lost in packing
assert extract_pairs(row) == to_pairs(records, tok)[: row.n_pairs]

# %%
# Forward noising at a few noise levels. Prompts stay put, EOS always goes.
rng = np.random.default_rng(0)
for t in (0.0, 0.3, 0.8):
    nb = apply_forward_masking(row.tokens, row.roles, t, rng, mask_id=tok.mask_id, eos_id=tok.eos_id)
    shown = tok.decode(nb.x_t).replace("<mask>", "#").replace("<pad>", "_")
    print(f"t={t:.1f}  {shown}")

# the masking law, checked on a big sample
big = np.tile(row.roles, 2000)
x0 = np.tile(row.tokens, 2000)
nb = apply_forward_masking(x0, big, 0.3, rng, mask_id=tok.mask_id, eos_id=tok.eos_id)
print("response mask rate", nb.mask[big == Role.RESPONSE].mean().round(4),
      "| eos", nb.mask[big == Role.EOS_SEPARATOR].mean(),
      "| prompt", nb.mask[big == Role.PROMPT].mean())
