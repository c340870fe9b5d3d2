"""Deterministic synthetic multilingual corpora.

Every language owns a disjoint slice of the vocabulary and renders a shared
"pivot" token sequence through its own permutation, so parallel sentences
share meaning and language identity is exact.  The reserved (unseen) slice
can borrow a fixed set of word forms from one trained language to emulate
linguistic relatedness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_SPECIALS = 3


class Undetermined(ValueError):
    """No decision can be made (e.g. a sequence without content tokens)."""


class TooShortToCorrupt(ValueError):
    """Signals that an example should be skipped by the span-corruption sampler."""


@dataclass(frozen=True)
class VocabLayout:
    """Token id regions: language slices, then PAD/BOS/EOS, then sentinels.

    ``n_slices`` counts every allocated slice, including the reserved one.
    """

    base_vocab: int = 64
    n_slices: int = 5
    n_sentinels: int = 8

    @property
    def pad(self) -> int:
        return self.n_slices * self.base_vocab

    @property
    def bos(self) -> int:
        return self.pad + 1

    @property
    def eos(self) -> int:
        return self.pad + 2

    @property
    def sentinels(self) -> list[int]:
        start = self.pad + N_SPECIALS
        return list(range(start, start + self.n_sentinels))

    @property
    def vocab_size(self) -> int:
        return self.n_slices * self.base_vocab + N_SPECIALS + self.n_sentinels

    def is_content(self, tokens) -> np.ndarray:
        t = np.asarray(tokens)
        return (t >= 0) & (t < self.pad)

    def is_sentinel(self, tok: int) -> bool:
        return self.pad + N_SPECIALS <= tok < self.vocab_size

    def slice_of(self, tokens) -> np.ndarray:
        return np.asarray(tokens) // self.base_vocab

    def header(self, n_trained: int) -> str:
        return (
            f"# layout base_vocab={self.base_vocab} slices={self.n_slices} trained={n_trained} "
            f"reserved={self.n_slices - n_trained} pad={self.pad} bos={self.bos} eos={self.eos} "
            f"sentinels={self.sentinels[0]}..{self.sentinels[-1]} vocab_size={self.vocab_size}"
        )


@dataclass
class SyntheticLanguage:
    id: int
    base_vocab: int
    perm: np.ndarray
    borrow_from: int | None = None
    borrowed: np.ndarray | None = None  # bool mask over pivot tokens rendered in the donor slice
    inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(self.base_vocab)):
            raise ValueError("perm must be a permutation of [0, base_vocab)")
        self.inverse = np.argsort(self.perm)

    @property
    def offset(self) -> int:
        return self.id * self.base_vocab


def make_languages(n_trained: int, base_vocab: int, seed: int, related_to: int | None = None,
                   borrow_rate: float = 0.75) -> list[SyntheticLanguage]:
    """Trained languages plus one reserved language.

    With ``related_to=j`` the reserved language shares language j's
    permutation and writes a ``borrow_rate`` fraction of its word forms in
    j's slice (cognates); otherwise it has its own permutation and no loans.
    """
    langs = []
    for i in range(n_trained):
        rng = np.random.default_rng([seed, 1, i])
        langs.append(SyntheticLanguage(i, base_vocab, rng.permutation(base_vocab)))
    rng = np.random.default_rng([seed, 1, n_trained])
    if related_to is None:
        langs.append(SyntheticLanguage(n_trained, base_vocab, rng.permutation(base_vocab)))
    else:
        if not 0 <= related_to < n_trained:
            raise ValueError(f"related_to={related_to} outside [0, {n_trained})")
        borrowed = np.zeros(base_vocab, dtype=bool)
        borrowed[rng.permutation(base_vocab)[: int(round(borrow_rate * base_vocab))]] = True
        langs.append(SyntheticLanguage(n_trained, base_vocab, langs[related_to].perm.copy(),
                                       borrow_from=related_to, borrowed=borrowed))
    return langs


# ---------------------------------------------------------------- pivot grammar


@dataclass
class BigramGrammar:
    """Sparse first-order Markov chain over pivot tokens shared by all languages."""

    initial: np.ndarray
    transition: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, base_vocab: int = 64, branching: int = 4) -> "BigramGrammar":
        rng = np.random.default_rng([seed, 0])
        trans = np.zeros((base_vocab, base_vocab))
        for a in range(base_vocab):
            succ = rng.choice(base_vocab, size=branching, replace=False)
            trans[a, succ] = rng.dirichlet(np.ones(branching))
        return cls(np.full(base_vocab, 1.0 / base_vocab), trans)

    @property
    def base_vocab(self) -> int:
        return len(self.initial)


def gen_pivot(grammar: BigramGrammar | int, rng: np.random.Generator, max_len: int = 24,
              min_len: int = 8) -> list[int]:
    """Sample a pivot sequence with length uniform in ``[min_len, max_len - 4]``."""
    if isinstance(grammar, (int, np.integer)):
        grammar = BigramGrammar.from_seed(int(grammar))
    hi = max_len - 4
    if hi < min_len:
        raise ValueError(f"max_len={max_len} leaves no room for pivots of length >= {min_len}")
    n = int(rng.integers(min_len, hi + 1))
    V = grammar.base_vocab
    cdf = np.cumsum(grammar.transition, axis=1)
    seq = [int(rng.choice(V, p=grammar.initial))]
    for u in rng.random(n - 1):
        seq.append(int(min(np.searchsorted(cdf[seq[-1]], u, side="right"), V - 1)))
    return seq


def render(pivot: Sequence[int], lang: SyntheticLanguage) -> list[int]:
    p = np.asarray(pivot, dtype=np.int64)
    if p.size and (p.min() < 0 or p.max() >= lang.base_vocab):
        raise ValueError(f"pivot token outside [0, {lang.base_vocab})")
    out = lang.offset + lang.perm[p]
    if lang.borrowed is not None:
        donor = lang.borrow_from * lang.base_vocab
        out = np.where(lang.borrowed[p], donor + lang.perm[p], out)
    return out.tolist()


def derender(tokens: Sequence[int], lang: SyntheticLanguage) -> list[int]:
    t = np.asarray(tokens, dtype=np.int64)
    rel = t - lang.offset
    if lang.borrowed is not None:
        donor = lang.borrow_from * lang.base_vocab
        rel = np.where((t >= donor) & (t < donor + lang.base_vocab), t - donor, rel)
    if rel.size and (rel.min() < 0 or rel.max() >= lang.base_vocab):
        raise ValueError(f"token outside language {lang.id}'s slice")
    return lang.inverse[rel].tolist()


# ---------------------------------------------------------------- span corruption


def _segment(rng: np.random.Generator, total: int, parts: int) -> np.ndarray:
    """Random composition of ``total`` into ``parts`` positive integers."""
    if parts == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [total]]))


def span_corrupt(tokens: Sequence[int], layout: VocabLayout, rng: np.random.Generator,
                 noise_density: float = 0.15, mean_span_len: float = 3.0) -> tuple[list[int], list[int]]:
    """Replace random spans with sentinels; return (input, sentinel-delimited target + EOS).

    The number of noise tokens is ``n * noise_density`` with stochastic
    rounding, so the expected corrupted fraction equals the density exactly.
    """
    if not 0.0 < noise_density < 1.0:
        raise ValueError(f"noise_density must lie in (0, 1), got {noise_density}")
    tokens = list(tokens)
    n = len(tokens)
    if n < 4:
        raise TooShortToCorrupt(f"sequence of length {n} is too short to corrupt")
    num_noise = min(int(math.floor(n * noise_density + rng.random())), n - 1)
    if num_noise == 0:
        return tokens, [layout.eos]
    num_spans = max(1, int(round(num_noise / mean_span_len)))
    num_spans = min(num_spans, num_noise, n - num_noise, layout.n_sentinels)
    noise_lens = _segment(rng, num_noise, num_spans)
    keep_lens = _segment(rng, n - num_noise, num_spans)
    inp, tgt = [], []
    pos = 0
    for i in range(num_spans):
        inp.extend(tokens[pos:pos + keep_lens[i]])
        pos += keep_lens[i]
        s = layout.sentinels[i]
        inp.append(s)
        tgt.append(s)
        tgt.extend(tokens[pos:pos + noise_lens[i]])
        pos += noise_lens[i]
    tgt.append(layout.eos)
    return inp, tgt


def splice(inp: Sequence[int], target: Sequence[int], layout: VocabLayout) -> list[int]:
    """Undo :func:`span_corrupt` by substituting each sentinel's span."""
    spans: dict[int, list[int]] = {}
    cur = None
    for t in target:
        if t == layout.eos:
            break
        if layout.is_sentinel(t):
            cur = spans.setdefault(t, [])
        elif cur is not None:
            cur.append(t)
    out = []
    for t in inp:
        out.extend(spans.get(t, [])) if layout.is_sentinel(t) else out.append(t)
    return out


# ---------------------------------------------------------------- examples


@dataclass
class Example:
    input: list[int]
    target: list[int]  # always terminated by EOS
    lang: int


def gen_task(lang: SyntheticLanguage, rng: np.random.Generator, grammar: BigramGrammar,
             layout: VocabLayout, max_len: int = 24) -> Example:
    """Extraction task: the target is the even-position tokens of the input."""
    pivot = gen_pivot(grammar, rng, max_len)
    return Example(render(pivot, lang), render(pivot[::2], lang) + [layout.eos], lang.id)


def gen_pretrain_example(lang: SyntheticLanguage, rng: np.random.Generator, grammar: BigramGrammar,
                         layout: VocabLayout, max_len: int = 24, noise_density: float = 0.15,
                         mean_span_len: float = 3.0) -> Example:
    pivot = gen_pivot(grammar, rng, max_len)
    inp, tgt = span_corrupt(render(pivot, lang), layout, rng, noise_density, mean_span_len)
    return Example(inp, tgt, lang.id)


def build_split(kind: str, langs: Iterable[SyntheticLanguage], count: int, seed: int,
                grammar: BigramGrammar, layout: VocabLayout, max_len: int = 24,
                stream: int = 0) -> list[Example]:
    """``count`` examples per language, each language drawn from its own seeded stream."""
    out = []
    for lang in langs:
        rng = np.random.default_rng([seed, 2, stream, lang.id])
        for _ in range(count):
            if kind == "pretrain":
                out.append(gen_pretrain_example(lang, rng, grammar, layout, max_len))
            elif kind == "task":
                out.append(gen_task(lang, rng, grammar, layout, max_len))
            else:
                raise ValueError(f"unknown split kind {kind!r}")
    return out


# ---------------------------------------------------------------- analysis


def lid(tokens: Sequence[int], layout: VocabLayout) -> tuple[int, float]:
    """Majority slice of the content tokens; ties go to the lowest language id."""
    t = np.asarray(tokens, dtype=np.int64)
    content = t[layout.is_content(t)]
    if content.size == 0:
        raise Undetermined("no content tokens to identify a language from")
    counts = np.bincount(content // layout.base_vocab, minlength=layout.n_slices)
    best = int(np.argmax(counts))
    return best, float(counts[best] / content.size)


def to_pivot(tokens: Sequence[int], languages: Sequence[SyntheticLanguage],
             layout: VocabLayout) -> np.ndarray:
    """Per-token pivot ids, decoding each token through its own slice; -1 for non-content."""
    t = np.asarray(tokens, dtype=np.int64)
    out = np.full(t.shape, -1, dtype=np.int64)
    for i, tok in enumerate(t):
        if 0 <= tok < layout.pad:
            s = tok // layout.base_vocab
            if s < len(languages):
                out[i] = languages[s].inverse[tok - s * layout.base_vocab]
    return out


def strip_specials(tokens: Sequence[int], layout: VocabLayout) -> list[int]:
    out = []
    for t in tokens:
        if t == layout.eos:
            break
        if t not in (layout.pad, layout.bos):
            out.append(int(t))
    return out


def meaning_match(output: Sequence[int], reference: Sequence[int],
                  languages: Sequence[SyntheticLanguage], layout: VocabLayout) -> float:
    """Position-wise agreement in pivot space, normalised by the longer sequence."""
    out = strip_specials(output, layout)
    ref = strip_specials(reference, layout)
    if not layout.is_content(out).any() or not layout.is_content(ref).any():
        raise Undetermined("cannot compare sequences without content tokens")
    po = to_pivot(out, languages, layout)
    pr = to_pivot(ref, languages, layout)
    n = min(len(po), len(pr))
    hits = int(np.sum((po[:n] == pr[:n]) & (pr[:n] >= 0)))
    return hits / max(len(po), len(pr))


# ---------------------------------------------------------------- corpus files


def write_corpus(path: str | Path, examples: Iterable[Example], layout: VocabLayout,
                 n_trained: int) -> None:
    """One example per line: ``lang<TAB>input ids<TAB>target ids`` after a layout header."""
    path = Path(path)
    lines = [layout.header(n_trained)]
    for ex in examples:
        lines.append(f"{ex.lang}\t{' '.join(map(str, ex.input))}\t{' '.join(map(str, ex.target))}")
    try:
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot write corpus {path}: {exc}") from exc


def read_corpus(path: str | Path) -> tuple[dict[str, str], list[Example]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    header: dict[str, str] = {}
    examples = []
    for line in text.splitlines():
        if line.startswith("#"):
            for item in line[1:].split():
                if "=" in item:
                    k, v = item.split("=", 1)
                    header[k] = v
            continue
        if not line.strip():
            continue
        lang, inp, tgt = line.split("\t")
        examples.append(Example([int(x) for x in inp.split()], [int(x) for x in tgt.split()], int(lang)))
    return header, examples
