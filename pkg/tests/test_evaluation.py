import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modseq import autograd as ag
from modseq.evaluation import (DecodeResult, EvalRow, SweepReport, TaskScores, format_report,
                               greedy_decode, greedy_decode_batch, language_histogram, module_sweep,
                               target_language_rate, task_eval)
from modseq.model import ModelConfig, Seq2SeqModel
from modseq.synth import Example, Undetermined, VocabLayout, make_languages, render

LAYOUT = VocabLayout(base_vocab=8, n_slices=3, n_sentinels=4)
LANGS = make_languages(2, 8, seed=0)


class Rigged:
    """Minimal model stand-in whose next-token logits come from ``rule(src_row, prefix)``."""

    def __init__(self, rule, n_languages=2, max_len=12):
        self.rule = rule
        self.config = ModelConfig(n_languages=n_languages, vocab_size=LAYOUT.vocab_size, max_len=max_len,
                                  d_model=4, n_heads=1, d_ff=4)
        self.active_lang = None

    def swap_language(self, lang):
        self.active_lang = lang

    def encode(self, src, langs, pad_id=None):
        return ag.Tensor(np.asarray(src, dtype=float))

    def decode(self, enc, src, tgt, langs, pad_id=None):
        src = np.asarray(src)
        B, T = tgt.shape
        out = np.zeros((B, T, LAYOUT.vocab_size))
        for b in range(B):
            row = [int(t) for t in src[b] if t != LAYOUT.pad]
            out[b, -1, self.rule(row, tgt[b, 1:].tolist())] = 1.0
        return ag.Tensor(out)


def eos_first(src, prefix):
    return LAYOUT.eos


def copier(src, prefix):
    return src[len(prefix)] if len(prefix) < len(src) else LAYOUT.eos


def tiny_model(seed=0):
    cfg = ModelConfig(n_languages=2, n_enc_layers=1, n_dec_layers=1, d_model=8, n_heads=2, d_ff=8,
                      d_bottleneck=4, vocab_size=LAYOUT.vocab_size, max_len=12)
    return Seq2SeqModel(cfg, seed=seed)


# ---------------------------------------------------------------- decoding


def test_eos_first_gives_empty_output():
    assert greedy_decode(Rigged(eos_first), [1, 2, 3], 0, LAYOUT) == []


def test_copy_rig_reproduces_input():
    src = render([3, 1, 4, 1, 5], LANGS[1])
    assert greedy_decode(Rigged(copier), src, 1, LAYOUT) == src


def test_decoding_stops_at_max_len():
    assert greedy_decode(Rigged(lambda s, p: 2), [1], 0, LAYOUT, max_len=5) == [2] * 5


def test_argmax_ties_break_to_lowest_id():
    class Flat(Rigged):
        def decode(self, enc, src, tgt, langs, pad_id=None):
            out = np.zeros((tgt.shape[0], tgt.shape[1], LAYOUT.vocab_size))
            out[..., [4, 9]] = 1.0
            return ag.Tensor(out)

    assert greedy_decode(Flat(None), [1], 0, LAYOUT, max_len=2) == [4, 4]


def test_decode_deterministic_and_batch_consistent():
    m = tiny_model()
    srcs = [[1, 2, 3], [4, 5], [6, 7, 1, 2]]
    batch = greedy_decode_batch(m, srcs, [0, 1, 0], LAYOUT)
    assert batch == greedy_decode_batch(m, srcs, [0, 1, 0], LAYOUT)
    for s, lang, out in zip(srcs, [0, 1, 0], batch):
        assert greedy_decode(m, s, lang, LAYOUT) == out


# ---------------------------------------------------------------- metrics


def _result(detected, target=1):
    return DecodeResult([], [], target, detected, 1.0, 0.0, False)


def test_target_rate_extremes_and_empty():
    assert target_language_rate([_result(1)] * 3, 1) == 1.0
    assert target_language_rate([_result(0), _result(None)], 1) == 0.0
    with pytest.raises(Undetermined):
        target_language_rate([], 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(0, 3)), min_size=1, max_size=30), st.integers(0, 3),
       st.randoms())
def test_target_rate_matches_recount_and_is_permutation_invariant(detected, target, rnd):
    results = [_result(d, target) for d in detected]
    count = 0
    for d in detected:
        if d == target:
            count += 1
    assert target_language_rate(results, target) == count / len(detected)
    rnd.shuffle(results)
    assert target_language_rate(results, target) == count / len(detected)
    assert 0.0 <= count / len(detected) <= 1.0


def test_task_eval_copy_rig_on_extraction():
    # the copier is exact only when the extraction of the input is the input itself
    exs = []
    for length in (1, 1, 2, 3, 5, 1):
        pivot = list(range(length))
        exs.append(Example(render(pivot, LANGS[0]), render(pivot[::2], LANGS[0]) + [LAYOUT.eos], 0))
    scores = task_eval(Rigged(copier), exs, 0, LANGS, LAYOUT)
    assert scores.exact_match == pytest.approx(3 / 6)
    assert scores.target_rate == 1.0
    for r in scores.results:
        if r.exact:
            assert r.meaning == 1.0 and r.detected_lang == r.target_lang


def test_task_eval_empty_is_undetermined():
    with pytest.raises(Undetermined):
        task_eval(tiny_model(), [], 0, LANGS, LAYOUT)


def test_task_eval_restores_active_language():
    m = tiny_model()
    m.swap_language(1)
    task_eval(m, [Example([1, 2], [1, LAYOUT.eos], 0)], 0, LANGS, LAYOUT)
    assert m.active_lang == 1


def test_swap_matches_model_with_only_that_bank():
    m = tiny_model()
    rng = np.random.default_rng(0)
    for p in m.adapter_params():
        p.tensor.data[...] = rng.normal(size=p.tensor.shape) * 0.5
    exs = [Example(render([1, 2, 3, 4], LANGS[1]), render([1, 3], LANGS[1]) + [LAYOUT.eos], 1)]
    a = task_eval(m, exs, 1, LANGS, LAYOUT)
    for p in m.adapter_params():
        if p.lang != 1:
            p.tensor.data[...] = 0.0
    b = task_eval(m, exs, 1, LANGS, LAYOUT)
    assert [r.output for r in a.results] == [r.output for r in b.results]


# ---------------------------------------------------------------- module sweep


def test_sweep_identical_modules_tie_to_lowest_id():
    m = tiny_model()
    exs = [Example(render([1, 2, 3], LANGS[2]), render([1, 3], LANGS[2]) + [LAYOUT.eos], 2)]
    report = module_sweep(m, exs, LANGS, LAYOUT)
    assert sorted(report.scores) == [0, 1]
    assert report.scores[0].meaning == report.scores[1].meaning
    assert report.ranking == [0, 1]


def test_sweep_ranking_descending():
    s = {i: TaskScores(0.0, v, 0.0) for i, v in enumerate([0.2, 0.9, 0.2, 0.5])}
    report = SweepReport(s)
    assert report.ranking == [1, 3, 0, 2]
    assert report.lines()[0].split("\t")[:4] == ["module", "1", "rank", "1"]


# ---------------------------------------------------------------- reports


def test_report_format_is_parseable():
    rows = [EvalRow(0, False, TaskScores(1.0, 1.0, 1.0)), EvalRow(2, True, TaskScores(0.25, 0.5, 0.125))]
    text = format_report(rows)
    machine = [line.split("\t") for line in text.splitlines() if line.startswith("eval\t")]
    assert len(machine) == 2
    assert machine[1][:3] == ["eval", "2", "zero_shot=1"]
    assert float(machine[1][machine[1].index("target_rate") + 1]) == 0.125
    assert "zero-shot" in text


def test_language_histogram_counts_undetermined():
    counts = language_histogram([_result(0), _result(2), _result(None), _result(2)], 3)
    assert counts.tolist() == [1, 0, 2, 1]
