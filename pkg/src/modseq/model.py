"""Encoder-decoder transformer with per-language bottleneck adapters.

One adapter unit sits after the feed-forward block of every encoder and
decoder layer.  Units are selected by the example's language id (fixed
routing); the ``dense`` variant keeps a single bank shared by every language.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

SHARED_GROUPS = ("Emb", "Enc_Att", "Enc_FFN", "Enc_LN", "Dec_Att", "Dec_CrossAtt", "Dec_FFN", "Dec_LN")
ADAPTER_GROUPS = ("Enc_Mod", "Dec_Mod")
VARIANTS = ("modular", "dense")


EMB_INIT_STD = 0.02
INPUT_SCALE = 1.0 / EMB_INIT_STD


class RoutingError(IndexError):
    pass


class LengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_languages: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    d_bottleneck: int | None = None
    vocab_size: int = 331
    max_len: int = 24
    eps: float = 1e-6

    def __post_init__(self):
        if self.d_bottleneck is None:
            self.d_bottleneck = self.d_model // 2
        for name in ("n_languages", "n_enc_layers", "n_dec_layers", "d_model", "n_heads",
                     "d_ff", "d_bottleneck", "vocab_size", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def n_layers(self) -> int:
        return self.n_enc_layers + self.n_dec_layers

    def to_dict(self) -> dict:
        return asdict(self)


def param_counts(config: ModelConfig) -> tuple[int, int]:
    """Closed-form (shared, per-language) parameter counts."""
    d, f, V, T, b = config.d_model, config.d_ff, config.vocab_size, config.max_len, config.d_bottleneck
    emb = V * d + 2 * T * d
    enc_layer = 4 * d * d + 2 * d * f + 2 * d
    dec_layer = 8 * d * d + 2 * d * f + 3 * d
    shared = emb + config.n_enc_layers * enc_layer + config.n_dec_layers * dec_layer + 2 * d
    per_language = config.n_layers * (b * d + b + d * b + d)
    return shared, per_language


@dataclass
class Param:
    name: str
    tensor: Tensor
    group: str
    lang: int = -1


@dataclass
class AdapterUnit:
    lang: int
    layer: int
    down: Tensor  # [d_bottleneck, d_model]
    down_b: Tensor
    up: Tensor  # [d_model, d_bottleneck]
    up_b: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.down, self.down_b, self.up, self.up_b]


def adapter_apply(h: Tensor, unit: AdapterUnit) -> Tensor:
    """Residual bottleneck ``h + U relu(D h + b_D) + b_U`` applied row-wise."""
    z = ag.relu(h @ ag.transpose(unit.down) + unit.down_b)
    return h + (z @ ag.transpose(unit.up) + unit.up_b)


def _adapter_delta(h: Tensor, unit: AdapterUnit) -> Tensor:
    z = ag.relu(h @ ag.transpose(unit.down) + unit.down_b)
    return z @ ag.transpose(unit.up) + unit.up_b


class Seq2SeqModel:
    """Pre-norm encoder-decoder with tied embeddings and language-routed adapters."""

    def __init__(self, config: ModelConfig, variant: str = "modular", seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.config = config
        self.variant = variant
        self.seed = seed
        self.active_lang: int | None = None
        self.params: dict[str, Param] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # ------------------------------------------------------------ construction

    def _add(self, name, array, group, lang=-1) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        t = Tensor(array, requires_grad=True, name=name)
        self.params[name] = Param(name, t, group, lang)
        return t

    def _build(self, rng: np.random.Generator) -> None:
        c = self.config
        d, f = c.d_model, c.d_ff

        def lin(n_in, n_out):
            return rng.normal(0.0, n_in**-0.5, size=(n_in, n_out))

        # small tables keep the tied head near-uniform at init; _embed rescales the
        # input side so the residual stream starts at unit RMS
        self.tok_emb = self._add("emb.tokens", rng.normal(0.0, EMB_INIT_STD, size=(c.vocab_size, d)), "Emb")
        self.enc_pos = self._add("emb.enc_pos", rng.normal(0.0, EMB_INIT_STD, size=(c.max_len, d)), "Emb")
        self.dec_pos = self._add("emb.dec_pos", rng.normal(0.0, EMB_INIT_STD, size=(c.max_len, d)), "Emb")

        self.enc_layers = []
        for i in range(c.n_enc_layers):
            p = f"enc.{i}"
            self.enc_layers.append({
                "ln_att": self._add(f"{p}.ln_att", np.ones(d), "Enc_LN"),
                "att": [self._add(f"{p}.att.{k}", lin(d, d), "Enc_Att") for k in "qkvo"],
                "ln_ffn": self._add(f"{p}.ln_ffn", np.ones(d), "Enc_LN"),
                "w1": self._add(f"{p}.ffn.w1", lin(d, f), "Enc_FFN"),
                "w2": self._add(f"{p}.ffn.w2", lin(f, d), "Enc_FFN"),
            })
        self.enc_final_ln = self._add("enc.final_ln", np.ones(d), "Enc_LN")

        self.dec_layers = []
        for i in range(c.n_dec_layers):
            p = f"dec.{i}"
            self.dec_layers.append({
                "ln_att": self._add(f"{p}.ln_att", np.ones(d), "Dec_LN"),
                "att": [self._add(f"{p}.att.{k}", lin(d, d), "Dec_Att") for k in "qkvo"],
                "ln_cross": self._add(f"{p}.ln_cross", np.ones(d), "Dec_LN"),
                "cross": [self._add(f"{p}.cross.{k}", lin(d, d), "Dec_CrossAtt") for k in "qkvo"],
                "ln_ffn": self._add(f"{p}.ln_ffn", np.ones(d), "Dec_LN"),
                "w1": self._add(f"{p}.ffn.w1", lin(d, f), "Dec_FFN"),
                "w2": self._add(f"{p}.ffn.w2", lin(f, d), "Dec_FFN"),
            })
        self.dec_final_ln = self._add("dec.final_ln", np.ones(d), "Dec_LN")

        n_banks = c.n_languages if self.variant == "modular" else 1
        b = c.d_bottleneck
        self.adapters: list[list[AdapterUnit]] = []
        for lang in range(n_banks):
            bank = []
            for layer in range(c.n_layers):
                group = "Enc_Mod" if layer < c.n_enc_layers else "Dec_Mod"
                p = f"adapter.{lang}.{layer}"
                bank.append(AdapterUnit(
                    lang, layer,
                    down=self._add(f"{p}.down", rng.normal(0.0, d**-0.5, size=(b, d)), group, lang),
                    down_b=self._add(f"{p}.down_b", np.zeros(b), group, lang),
                    up=self._add(f"{p}.up", np.zeros((d, b)), group, lang),
                    up_b=self._add(f"{p}.up_b", np.zeros(d), group, lang),
                ))
            self.adapters.append(bank)

    # ------------------------------------------------------------ accessors

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params.values()]

    def shared_params(self) -> list[Param]:
        return [p for p in self.params.values() if p.group in SHARED_GROUPS]

    def adapter_params(self) -> list[Param]:
        return [p for p in self.params.values() if p.group in ADAPTER_GROUPS]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ValueError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, arr in state.items():
            t = self.params[name].tensor
            if t.data.shape != np.shape(arr):
                raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {np.shape(arr)}")
            t.data[...] = arr

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    # ------------------------------------------------------------ routing

    def route(self, lang: int, layer: int) -> AdapterUnit:
        """Adapter unit for ``(lang, layer)``; identical for every token of an example."""
        if not 0 <= layer < self.config.n_layers:
            raise RoutingError(f"layer {layer} outside [0, {self.config.n_layers})")
        if not 0 <= lang < self.config.n_languages:
            raise RoutingError(f"language {lang} outside [0, {self.config.n_languages})")
        return self.adapters[lang if self.variant == "modular" else 0][layer]

    def swap_language(self, lang: int | None) -> None:
        """Route subsequent calls that omit ``lang`` through ``lang``'s modules."""
        if lang is not None and not 0 <= lang < self.config.n_languages:
            raise RoutingError(f"language {lang} outside [0, {self.config.n_languages})")
        self.active_lang = lang

    def _langs(self, lang, batch: int) -> np.ndarray:
        if lang is None:
            if self.active_lang is None:
                raise RoutingError("no language given and no active language set")
            lang = self.active_lang
        langs = np.broadcast_to(np.asarray(lang, dtype=np.intp), (batch,))
        bad = (langs < 0) | (langs >= self.config.n_languages)
        if bad.any():
            raise RoutingError(f"language {langs[bad][0]} outside [0, {self.config.n_languages})")
        return langs

    def _apply_adapters(self, h: Tensor, langs: np.ndarray, layer: int) -> Tensor:
        if self.variant == "dense":
            return adapter_apply(h, self.route(0, layer))
        present = np.unique(langs)
        if len(present) == 1:
            return adapter_apply(h, self.route(int(present[0]), layer))
        rows, deltas = [], []
        for lang in present:
            idx = np.nonzero(langs == lang)[0]
            rows.append(idx)
            deltas.append(_adapter_delta(ag.take(h, idx), self.route(int(lang), layer)))
        order = np.argsort(np.concatenate(rows), kind="stable")
        return h + ag.take(ag.concat(deltas, axis=0), order)

    # ------------------------------------------------------------ layers

    def _attention(self, x: Tensor, kv: Tensor, weights, mask: np.ndarray) -> Tensor:
        B, Tq, d = x.shape
        Tk = kv.shape[1]
        H = self.config.n_heads
        dh = d // H
        wq, wk, wv, wo = weights
        q = ag.transpose(ag.reshape(x @ wq, (B, Tq, H, dh)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(kv @ wk, (B, Tk, H, dh)), (0, 2, 3, 1))
        v = ag.transpose(ag.reshape(kv @ wv, (B, Tk, H, dh)), (0, 2, 1, 3))
        scores = (q @ k) * (dh**-0.5) + mask
        ctx = ag.softmax(scores) @ v
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, Tq, d))
        return ctx @ wo

    def _ffn(self, x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
        return ag.relu(x @ w1) @ w2

    def _embed(self, ids: np.ndarray, pos: Tensor) -> Tensor:
        h = ag.embedding(self.tok_emb, ids) + ag.take(pos, np.arange(ids.shape[-1]))
        return h * INPUT_SCALE

    def _check(self, ids: np.ndarray) -> None:
        c = self.config
        if ids.shape[-1] > c.max_len:
            raise LengthError(f"sequence length {ids.shape[-1]} exceeds max_len={c.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise IndexError(f"token id outside [0, {c.vocab_size})")

    # ------------------------------------------------------------ forward passes

    def encode(self, src, lang=None, pad_id: int | None = None, skip_adapters: bool = False):
        """Encoder states [B, T, d] (or [T, d] for a single unbatched sequence)."""
        src = np.asarray(src, dtype=np.intp)
        single = src.ndim == 1
        if single:
            src = src[None]
        self._check(src)
        B, T = src.shape
        langs = self._langs(lang, B)
        eps = self.config.eps
        mask = self._key_mask(src, pad_id)
        h = self._embed(src, self.enc_pos)
        for i, layer in enumerate(self.enc_layers):
            x = ag.rms_norm(h, layer["ln_att"], eps)
            h = h + self._attention(x, x, layer["att"], mask)
            h = h + self._ffn(ag.rms_norm(h, layer["ln_ffn"], eps), layer["w1"], layer["w2"])
            if not skip_adapters:
                h = self._apply_adapters(h, langs, i)
        h = ag.rms_norm(h, self.enc_final_ln, eps)
        if single:
            h = ag.reshape(h, h.shape[1:])
        return h

    @staticmethod
    def _key_mask(src: np.ndarray, pad_id: int | None) -> np.ndarray:
        B, T = src.shape
        mask = np.zeros((B, 1, 1, T))
        if pad_id is not None:
            mask[(src == pad_id)[:, None, None, :]] = -np.inf
        return mask

    def decode(self, enc: Tensor, src, tgt_in, lang=None, pad_id: int | None = None,
               skip_adapters: bool = False) -> Tensor:
        """Logits [B, T_t, V] given encoder states from :meth:`encode`."""
        src = np.asarray(src, dtype=np.intp)
        tgt_in = np.asarray(tgt_in, dtype=np.intp)
        if src.ndim == 1:
            src = src[None]
        single = tgt_in.ndim == 1
        if single:
            tgt_in = tgt_in[None]
        if enc.ndim == 2:
            enc = ag.reshape(enc, (1,) + enc.shape)
        self._check(tgt_in)
        B, T = tgt_in.shape
        langs = self._langs(lang, B)
        eps = self.config.eps
        cross_mask = self._key_mask(src, pad_id)
        causal = np.triu(np.full((T, T), -np.inf), k=1)[None, None]
        h = self._embed(tgt_in, self.dec_pos)
        for i, layer in enumerate(self.dec_layers):
            x = ag.rms_norm(h, layer["ln_att"], eps)
            h = h + self._attention(x, x, layer["att"], causal)
            x = ag.rms_norm(h, layer["ln_cross"], eps)
            h = h + self._attention(x, enc, layer["cross"], cross_mask)
            h = h + self._ffn(ag.rms_norm(h, layer["ln_ffn"], eps), layer["w1"], layer["w2"])
            if not skip_adapters:
                h = self._apply_adapters(h, langs, self.config.n_enc_layers + i)
        h = ag.rms_norm(h, self.dec_final_ln, eps)
        logits = h @ ag.transpose(self.tok_emb)
        if single:
            logits = ag.reshape(logits, logits.shape[1:])
        return logits

    def forward(self, src, tgt_in, lang=None, pad_id: int | None = None,
                skip_adapters: bool = False) -> Tensor:
        src = np.asarray(src, dtype=np.intp)
        tgt_in = np.asarray(tgt_in, dtype=np.intp)
        if src.ndim != tgt_in.ndim:
            raise ValueError("src and tgt_in must both be batched or both unbatched")
        B = 1 if src.ndim == 1 else src.shape[0]
        langs = self._langs(lang, B)
        enc = self.encode(src, langs if src.ndim == 2 else langs[0], pad_id, skip_adapters)
        return self.decode(enc, src, tgt_in, langs if src.ndim == 2 else langs[0], pad_id, skip_adapters)

    __call__ = forward
