"""Per-language adapters: zero-init identity, fixed routing and the parameter budget."""

import numpy as np

from modseq import ModelConfig, Seq2SeqModel, param_counts

cfg = ModelConfig(n_languages=3, n_enc_layers=1, n_dec_layers=1, d_model=16, n_heads=2, d_ff=32,
                  d_bottleneck=8, vocab_size=40, max_len=12)
model = Seq2SeqModel(cfg, "modular", seed=0)

shared, per_lang = param_counts(cfg)
print(f"shared parameters {shared}, per language {per_lang}, total {shared + cfg.n_languages * per_lang}")

rng = np.random.default_rng(1)
src = rng.integers(0, 40, (2, 8))
tgt = rng.integers(0, 40, (2, 5))

# up-projections start at zero, so a fresh model ignores its adapters entirely
with_adapters = model.forward(src, tgt, 0).data
without = model.forward(src, tgt, 0, skip_adapters=True).data
print("fresh model equals adapter-free model:", np.array_equal(with_adapters, without))

# perturb language 2's bank: language 0 does not notice, language 2 does
before0, before2 = model.forward(src, tgt, 0).data, model.forward(src, tgt, 2).data
for p in model.adapter_params():
    if p.lang == 2:
        p.tensor.data += rng.normal(size=p.tensor.shape)
print("language 0 unchanged:", np.array_equal(before0, model.forward(src, tgt, 0).data))
print("language 2 changed:  ", not np.array_equal(before2, model.forward(src, tgt, 2).data))

# the dense variant keeps one bank shared by every language
dense = Seq2SeqModel(cfg, "dense", seed=0)
print("dense adapter banks:", len(dense.adapters), "modular:", len(model.adapters))

# after a swap, calls that omit the language use that language's modules
model.swap_language(2)
print("swapped output equals language 2 routing:",
      np.array_equal(model.forward(src, tgt).data, model.forward(src, tgt, 2).data))
model.swap_language(None)
