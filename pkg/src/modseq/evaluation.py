"""Greedy decoding, task metrics, output-language analysis and module sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .synth import (Example, SyntheticLanguage, Undetermined, VocabLayout, lid, meaning_match,
                    strip_specials)


def greedy_decode_batch(model, srcs: Sequence[Sequence[int]], lang, layout: VocabLayout,
                        max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens; ties go to the lowest id.

    ``lang`` is one language id or one per input.  Outputs exclude BOS/EOS.
    """
    if not len(srcs):
        return []
    limit = model.config.max_len - 1 if max_len is None else max_len
    B = len(srcs)
    Ts = max(len(s) for s in srcs)
    src = np.full((B, Ts), layout.pad, dtype=np.intp)
    for i, s in enumerate(srcs):
        src[i, : len(s)] = s
    langs = np.broadcast_to(np.asarray(lang, dtype=np.intp), (B,)).copy()
    outputs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with ag.no_grad():
        enc = model.encode(src, langs, pad_id=layout.pad)
        tgt = np.full((B, 1), layout.bos, dtype=np.intp)
        for _ in range(limit):
            logits = model.decode(enc, src, tgt, langs, pad_id=layout.pad).data[:, -1]
            nxt = np.argmax(logits, axis=-1)
            for i in range(B):
                if not done[i]:
                    if nxt[i] == layout.eos:
                        done[i] = True
                    else:
                        outputs[i].append(int(nxt[i]))
            if done.all():
                break
            tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
    return outputs


def greedy_decode(model, src: Sequence[int], lang: int, layout: VocabLayout,
                  max_len: int | None = None) -> list[int]:
    return greedy_decode_batch(model, [src], lang, layout, max_len)[0]


@dataclass
class DecodeResult:
    output: list[int]
    reference: list[int]
    target_lang: int
    detected_lang: int | None
    confidence: float
    meaning: float
    exact: bool


def score_output(output: Sequence[int], example: Example, languages: Sequence[SyntheticLanguage],
                 layout: VocabLayout) -> DecodeResult:
    out = strip_specials(output, layout)
    ref = strip_specials(example.target, layout)
    try:
        detected, conf = lid(out, layout)
    except Undetermined:
        detected, conf = None, 0.0
    try:
        meaning = meaning_match(out, ref, languages, layout)
    except Undetermined:
        meaning = 0.0
    return DecodeResult(out, ref, example.lang, detected, conf, meaning, out == ref)


def target_language_rate(results: Sequence[DecodeResult], target: int) -> float:
    if not results:
        raise Undetermined("no decode results to rate")
    return sum(r.detected_lang == target for r in results) / len(results)


@dataclass
class TaskScores:
    exact_match: float
    meaning: float
    target_rate: float
    results: list[DecodeResult] = field(repr=False, default_factory=list)


def task_eval(model, examples: Sequence[Example], inference_lang: int,
              languages: Sequence[SyntheticLanguage], layout: VocabLayout,
              max_len: int | None = None) -> TaskScores:
    """Swap to ``inference_lang``'s modules, decode every example and aggregate."""
    if not examples:
        raise Undetermined("no examples to evaluate")
    previous = model.active_lang
    model.swap_language(inference_lang)
    try:
        outs = greedy_decode_batch(model, [e.input for e in examples], model.active_lang, layout, max_len)
    finally:
        model.swap_language(previous)
    results = [score_output(o, e, languages, layout) for o, e in zip(outs, examples)]
    rates = [r.detected_lang == r.target_lang for r in results]
    return TaskScores(
        exact_match=float(np.mean([r.exact for r in results])),
        meaning=float(np.mean([r.meaning for r in results])),
        target_rate=float(np.mean(rates)),
        results=results,
    )


@dataclass
class SweepReport:
    scores: dict[int, TaskScores]
    metric: str = "meaning"

    @property
    def ranking(self) -> list[int]:
        return sorted(self.scores, key=lambda lang: (-getattr(self.scores[lang], self.metric), lang))

    def lines(self) -> list[str]:
        out = []
        for rank, lang in enumerate(self.ranking, 1):
            s = self.scores[lang]
            out.append(f"module\t{lang}\trank\t{rank}\tmeaning\t{s.meaning!r}\texact_match\t{s.exact_match!r}")
        return out


def module_sweep(model, examples: Sequence[Example], languages: Sequence[SyntheticLanguage],
                 layout: VocabLayout, metric: str = "meaning") -> SweepReport:
    """Evaluate unseen-language examples through every existing language module."""
    scores = {
        lang: task_eval(model, examples, lang, languages, layout)
        for lang in range(model.config.n_languages)
    }
    return SweepReport(scores, metric)


# ---------------------------------------------------------------- reports


@dataclass
class EvalRow:
    lang: int
    zero_shot: bool
    scores: TaskScores


def format_report(rows: Sequence[EvalRow]) -> str:
    """Machine-parseable lines followed by a fixed-width summary table."""
    lines = []
    for r in rows:
        s = r.scores
        lines.append(
            f"eval\t{r.lang}\tzero_shot={int(r.zero_shot)}\texact_match\t{s.exact_match!r}"
            f"\tmeaning\t{s.meaning!r}\ttarget_rate\t{s.target_rate!r}"
        )
    lines.append("")
    lines.append(f"{'lang':>4}  {'zero-shot':>9}  {'EM':>6}  {'meaning':>7}  {'tgt-lang':>8}")
    for r in rows:
        s = r.scores
        lines.append(
            f"{r.lang:>4}  {'yes' if r.zero_shot else 'no':>9}  {s.exact_match:6.3f}  "
            f"{s.meaning:7.3f}  {s.target_rate:8.3f}"
        )
    return "\n".join(lines) + "\n"


def language_histogram(results: Sequence[DecodeResult], n_slices: int) -> np.ndarray:
    """Counts of detected output languages; the last bucket holds undetermined outputs."""
    counts = np.zeros(n_slices + 1, dtype=np.int64)
    for r in results:
        counts[n_slices if r.detected_lang is None else r.detected_lang] += 1
    return counts
