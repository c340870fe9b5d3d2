import math

import numpy as np
import pytest

from modseq import autograd as ag
from modseq.model import (AdapterUnit, LengthError, ModelConfig, RoutingError, Seq2SeqModel, adapter_apply,
                          param_counts)
from modseq.autograd import Tensor


def small_config(**kw):
    base = dict(n_languages=3, n_enc_layers=2, n_dec_layers=2, d_model=8, n_heads=2, d_ff=12,
                d_bottleneck=4, vocab_size=20, max_len=10)
    base.update(kw)
    return ModelConfig(**base)


def randomize_adapters(model, rng, langs):
    for p in model.adapter_params():
        if p.lang in langs:
            p.tensor.data[...] = rng.normal(size=p.tensor.shape)


# ---------------------------------------------------------------- routing / adapters


def test_route_direct_index():
    m = Seq2SeqModel(small_config())
    assert m.route(2, 0) is m.adapters[2][0]
    assert m.route(1, 3) is m.route(1, 3)


def test_route_bounds():
    m = Seq2SeqModel(small_config(n_languages=4))
    with pytest.raises(RoutingError):
        m.route(4, 0)
    with pytest.raises(RoutingError):
        m.route(0, 4)


def test_dense_variant_shares_one_bank():
    m = Seq2SeqModel(small_config(), variant="dense")
    assert len(m.adapters) == 1
    assert m.route(0, 1) is m.route(2, 1)


def _unit(D, bD, U, bU):
    return AdapterUnit(0, 0, Tensor(D), Tensor(bD), Tensor(U), Tensor(bU))


def test_adapter_hand_evaluation():
    unit = _unit([[1.0, 0.0]], [0.0], [[1.0], [0.0]], [0.0, 0.0])
    out = adapter_apply(Tensor([[2.0, 3.0]]), unit)
    np.testing.assert_array_equal(out.data, [[4.0, 3.0]])


def test_adapter_zero_init_is_identity():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(5, 8))
    unit = _unit(rng.normal(size=(4, 8)), rng.normal(size=4), np.zeros((8, 4)), np.zeros(8))
    assert adapter_apply(Tensor(h), unit).data.tobytes() == h.tobytes()


def test_adapter_negative_preactivation_is_identity():
    h = np.array([[1.0, 2.0], [0.5, 0.1]])
    unit = _unit([[1.0, 1.0]], [-10.0], [[3.0], [4.0]], [0.0, 0.0])
    np.testing.assert_array_equal(adapter_apply(Tensor(h), unit).data, h)


# ---------------------------------------------------------------- forward properties


def test_zero_init_matches_adapter_free_model():
    m = Seq2SeqModel(small_config(), seed=1)
    rng = np.random.default_rng(0)
    src, tgt = rng.integers(0, 20, 7), rng.integers(0, 20, 5)
    ref = m.forward(src, tgt, 0, skip_adapters=True).data
    for lang in range(3):
        assert m.forward(src, tgt, lang).data.tobytes() == ref.tobytes()
        assert m.encode(src, lang).data.tobytes() == m.encode(src, 0).data.tobytes()


def test_routing_isolation():
    m = Seq2SeqModel(small_config(), seed=2)
    rng = np.random.default_rng(1)
    randomize_adapters(m, rng, {0, 1, 2})
    src, tgt = rng.integers(0, 20, (2, 6)), rng.integers(0, 20, (2, 4))
    before = m.forward(src, tgt, 1).data.copy()
    randomize_adapters(m, rng, {0, 2})
    assert m.forward(src, tgt, 1).data.tobytes() == before.tobytes()


def test_mixed_language_batch_matches_single_example_calls():
    m = Seq2SeqModel(small_config(), seed=3)
    rng = np.random.default_rng(2)
    randomize_adapters(m, rng, {0, 1, 2})
    src, tgt = rng.integers(0, 20, (3, 6)), rng.integers(0, 20, (3, 4))
    langs = np.array([2, 0, 2])
    batched = m.forward(src, tgt, langs).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], m.forward(src[i], tgt[i], int(langs[i])).data, atol=1e-12)


def test_causal_mask():
    m = Seq2SeqModel(small_config(), seed=4)
    rng = np.random.default_rng(3)
    randomize_adapters(m, rng, {1})
    src, tgt = rng.integers(0, 20, 6), rng.integers(0, 20, 6)
    base = m.forward(src, tgt, 1).data
    for t in range(5):
        changed = tgt.copy()
        changed[t + 1:] = rng.integers(0, 20, 5 - t)
        out = m.forward(src, changed, 1).data
        assert out[: t + 1].tobytes() == base[: t + 1].tobytes()


def test_deterministic_across_constructions():
    src, tgt = [1, 2, 3, 4], [5, 6]
    a = Seq2SeqModel(small_config(), seed=7).forward(src, tgt, 1).data
    b = Seq2SeqModel(small_config(), seed=7).forward(src, tgt, 1).data
    assert a.tobytes() == b.tobytes()


def test_length_and_token_errors():
    m = Seq2SeqModel(small_config())
    with pytest.raises(LengthError):
        m.encode(list(range(11)), 0)
    with pytest.raises(IndexError):
        m.encode([25], 0)


def test_padding_does_not_change_real_positions():
    m = Seq2SeqModel(small_config(), seed=5)
    pad = 19
    src = np.array([[3, 4, 5, pad, pad]])
    short = m.forward(np.array([[3, 4, 5]]), np.array([[1, 2]]), 0, pad_id=pad).data
    padded = m.forward(src, np.array([[1, 2]]), 0, pad_id=pad).data
    np.testing.assert_allclose(padded, short, atol=1e-12)


# ---------------------------------------------------------------- swap


def test_swap_language_equivalent_to_direct_routing():
    m = Seq2SeqModel(small_config(), seed=6)
    randomize_adapters(m, np.random.default_rng(4), {0, 1, 2})
    src, tgt = [1, 2, 3], [4, 5]
    m.swap_language(2)
    swapped = m.forward(src, tgt).data
    assert swapped.tobytes() == m.forward(src, tgt, 2).data.tobytes()
    m.swap_language(0)
    m.swap_language(2)
    assert m.forward(src, tgt).data.tobytes() == swapped.tobytes()


def test_swap_to_fresh_unit_is_dense_equivalent():
    m = Seq2SeqModel(small_config(), seed=6)
    randomize_adapters(m, np.random.default_rng(4), {0, 1})
    m.swap_language(2)
    src, tgt = [1, 2, 3], [4, 5]
    assert m.forward(src, tgt).data.tobytes() == m.forward(src, tgt, 0, skip_adapters=True).data.tobytes()


def test_missing_language_is_routing_error():
    m = Seq2SeqModel(small_config())
    with pytest.raises(RoutingError):
        m.forward([1, 2], [3])


# ---------------------------------------------------------------- parameter accounting


def enumerate_counts(model):
    shared = sum(p.tensor.data.size for p in model.shared_params())
    per_lang = {}
    for p in model.adapter_params():
        per_lang[p.lang] = per_lang.get(p.lang, 0) + p.tensor.data.size
    return shared, per_lang


def test_param_counts_worked_example():
    cfg = ModelConfig(n_languages=2, n_enc_layers=2, n_dec_layers=2, d_model=8, n_heads=2, d_ff=16,
                      d_bottleneck=4, vocab_size=30, max_len=12)
    shared, per_lang = param_counts(cfg)
    assert per_lang == 4 * (8 * 4 + 4 + 4 * 8 + 8) == 304
    enum_shared, enum_lang = enumerate_counts(Seq2SeqModel(cfg))
    assert enum_shared == shared
    assert enum_lang == {0: 304, 1: 304}


def test_shared_count_independent_of_language_count():
    one = param_counts(small_config(n_languages=1))
    three = param_counts(small_config(n_languages=3))
    assert one == three
    assert enumerate_counts(Seq2SeqModel(small_config(n_languages=1)))[0] == \
        enumerate_counts(Seq2SeqModel(small_config(n_languages=3)))[0]


def test_zero_bottleneck_rejected():
    with pytest.raises(ValueError):
        small_config(d_bottleneck=0)


def test_default_bottleneck_is_half_hidden():
    assert ModelConfig(d_model=64, d_bottleneck=None).d_bottleneck == 32


def test_every_param_has_one_known_label():
    m = Seq2SeqModel(small_config())
    labels = {"Emb", "Enc_Att", "Enc_FFN", "Enc_LN", "Dec_Att", "Dec_CrossAtt", "Dec_FFN", "Dec_LN",
              "Enc_Mod", "Dec_Mod"}
    assert all(p.group in labels for p in m.params.values())
    assert len({id(p.tensor) for p in m.params.values()}) == len(m.params)


# ---------------------------------------------------------------- reference oracle


def _rms(x, g, eps):
    return g * x / np.sqrt(np.mean(x * x) + eps)


def _softmax_row(z):
    z = z - max(z)
    e = np.exp(z)
    return e / e.sum()


def reference_forward(model, src, tgt, lang):
    """Position-by-position evaluation of a one-layer, one-head model, written without the tape."""
    P = {name: p.tensor.data for name, p in model.params.items()}
    eps = model.config.eps
    d = model.config.d_model

    def attend(queries, keys, wq, wk, wv, wo, causal):
        out = []
        for i, q in enumerate(queries):
            qv = q @ wq
            scores = [qv @ (k @ wk) / math.sqrt(d) for k in keys]
            if causal:
                scores = scores[: i + 1]
            w = _softmax_row(np.array(scores))
            ctx = sum(w[j] * (keys[j] @ wv) for j in range(len(w)))
            out.append(ctx @ wo)
        return out

    def adapter(h, layer):
        D, bD = P[f"adapter.{lang}.{layer}.down"], P[f"adapter.{lang}.{layer}.down_b"]
        U, bU = P[f"adapter.{lang}.{layer}.up"], P[f"adapter.{lang}.{layer}.up_b"]
        return h + U @ np.maximum(D @ h + bD, 0.0) + bU

    # inputs are rescaled by 1 / 0.02 (the embedding init std)
    enc = [(P["emb.tokens"][t] + P["emb.enc_pos"][i]) * 50.0 for i, t in enumerate(src)]
    x = [_rms(h, P["enc.0.ln_att"], eps) for h in enc]
    a = attend(x, x, *(P[f"enc.0.att.{k}"] for k in "qkvo"), causal=False)
    enc = [h + ai for h, ai in zip(enc, a)]
    enc = [h + np.maximum(_rms(h, P["enc.0.ln_ffn"], eps) @ P["enc.0.ffn.w1"], 0) @ P["enc.0.ffn.w2"] for h in enc]
    enc = [_rms(adapter(h, 0), P["enc.final_ln"], eps) for h in enc]

    dec = [(P["emb.tokens"][t] + P["emb.dec_pos"][i]) * 50.0 for i, t in enumerate(tgt)]
    x = [_rms(h, P["dec.0.ln_att"], eps) for h in dec]
    a = attend(x, x, *(P[f"dec.0.att.{k}"] for k in "qkvo"), causal=True)
    dec = [h + ai for h, ai in zip(dec, a)]
    x = [_rms(h, P["dec.0.ln_cross"], eps) for h in dec]
    a = attend(x, enc, *(P[f"dec.0.cross.{k}"] for k in "qkvo"), causal=False)
    dec = [h + ai for h, ai in zip(dec, a)]
    dec = [h + np.maximum(_rms(h, P["dec.0.ln_ffn"], eps) @ P["dec.0.ffn.w1"], 0) @ P["dec.0.ffn.w2"] for h in dec]
    dec = [_rms(adapter(h, 1), P["dec.final_ln"], eps) for h in dec]
    return np.array(enc), np.array([P["emb.tokens"] @ h for h in dec])


def test_micro_config_matches_reference_oracle():
    cfg = ModelConfig(n_languages=2, n_enc_layers=1, n_dec_layers=1, d_model=6, n_heads=1, d_ff=10,
                      d_bottleneck=3, vocab_size=15, max_len=8)
    m = Seq2SeqModel(cfg, seed=11)
    rng = np.random.default_rng(5)
    randomize_adapters(m, rng, {0, 1})
    for p in m.shared_params():
        if p.group.endswith("LN"):
            p.tensor.data[...] = rng.uniform(0.5, 1.5, size=p.tensor.shape)
    src, tgt = rng.integers(0, 15, 7), rng.integers(0, 15, 5)
    for lang in (0, 1):
        ref_enc, ref_logits = reference_forward(m, src, tgt, lang)
        np.testing.assert_allclose(m.encode(src, lang).data, ref_enc, atol=1e-10, rtol=0)
        np.testing.assert_allclose(m.forward(src, tgt, lang).data, ref_logits, atol=1e-10, rtol=0)


def test_initial_loss_near_uniform():
    cfg = ModelConfig(vocab_size=331)
    m = Seq2SeqModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    src, tgt = rng.integers(0, 331, (4, 12)), rng.integers(0, 331, (4, 8))
    labels = rng.integers(0, 331, (4, 8))
    loss = ag.cross_entropy(m.forward(src, tgt, 0), labels).item()
    assert abs(loss - math.log(331)) < 0.05
