"""Toy languages: one shared bigram grammar, many vocabularies."""

import numpy as np

from modseq.synth import (BigramGrammar, VocabLayout, gen_pivot, gen_task, lid, make_languages, meaning_match,
                          render, span_corrupt, splice)

layout = VocabLayout(base_vocab=64, n_slices=5, n_sentinels=8)
langs = make_languages(4, 64, seed=0, related_to=2)
grammar = BigramGrammar.from_seed(0)
rng = np.random.default_rng(0)

pivot = gen_pivot(grammar, rng)
print("pivot    ", pivot)
for lang in langs:
    print(f"language {lang.id}", render(pivot, lang))

# the reserved language borrows most of its words from language 2
reserved = render(pivot, langs[4])
print("reserved written in slices", np.bincount(np.array(reserved) // 64, minlength=5))
print("language id of reserved sentence:", lid(reserved, layout))

# span corruption for pretraining
tokens = render(pivot, langs[1])
inp, tgt = span_corrupt(tokens, layout, rng)
print("corrupted input", inp)
print("target         ", tgt)
print("splice restores original:", splice(inp, tgt, layout) == tokens)

# the downstream task keeps every other token
ex = gen_task(langs[0], rng, grammar, layout)
print("task input ", ex.input)
print("task target", ex.target)

# a translation of the right answer still gets full meaning credit
translated = render(gen_pivot(grammar, np.random.default_rng(5)), langs[3])
print("meaning of the answer written in language 3:",
      meaning_match(render(pivot[::2], langs[3]), render(pivot[::2], langs[0]), langs, layout))
print("meaning of an unrelated sentence:", meaning_match(translated, ex.target, langs, layout))
