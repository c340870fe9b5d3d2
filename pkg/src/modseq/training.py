"""Pretraining and fine-tuning loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .freezing import FreezeConfig, Phase, build_mask, config_from_name
from .model import Seq2SeqModel
from .synth import Example, Undetermined, VocabLayout

logger = logging.getLogger(__name__)


class DataCoverageError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 200
    languages: list[int] = field(default_factory=lambda: [0])
    warmup: int = 50
    mixed_batches: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("steps must be >= 0; batch_size and eval_every must be positive")


@dataclass(frozen=True)
class MetricRecord:
    step: int
    phase: str
    lang: int
    metric: str
    value: float

    def line(self) -> str:
        return f"{self.step}\t{self.phase}\t{self.lang}\t{self.metric}\t{self.value!r}"


@dataclass
class MetricsHistory:
    records: list[MetricRecord] = field(default_factory=list)

    def add(self, step: int, phase: str, lang: int, metric: str, value: float) -> None:
        if self.records and step < self.records[-1].step:
            raise ValueError("metrics must be appended in step order")
        self.records.append(MetricRecord(step, phase, lang, metric, float(value)))

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def steps(self) -> list[int]:
        return sorted({r.step for r in self.records})

    def final(self, metric: str) -> dict[int, float]:
        last = max(r.step for r in self.records)
        return {r.lang: r.value for r in self.records if r.step == last and r.metric == metric}

    def series(self, metric: str, lang: int) -> list[tuple[int, float]]:
        return [(r.step, r.value) for r in self.records if r.metric == metric and r.lang == lang]

    @classmethod
    def parse(cls, text: str) -> "MetricsHistory":
        h = cls()
        for line in text.splitlines():
            if line.strip():
                step, phase, lang, metric, value = line.split("\t")
                h.records.append(MetricRecord(int(step), phase, int(lang), metric, float(value)))
        return h


# ---------------------------------------------------------------- batching


def collate(examples: Sequence[Example], layout: VocabLayout):
    """Padded (src, decoder input, labels, langs) arrays; labels use PAD as ignore id."""
    B = len(examples)
    Ts = max(len(e.input) for e in examples)
    Tt = max(len(e.target) for e in examples)
    src = np.full((B, Ts), layout.pad, dtype=np.intp)
    tgt_in = np.full((B, Tt), layout.pad, dtype=np.intp)
    labels = np.full((B, Tt), layout.pad, dtype=np.intp)
    for i, e in enumerate(examples):
        src[i, : len(e.input)] = e.input
        tgt_in[i, 0] = layout.bos
        tgt_in[i, 1 : len(e.target)] = e.target[:-1]
        labels[i, : len(e.target)] = e.target
    langs = np.array([e.lang for e in examples], dtype=np.intp)
    return src, tgt_in, labels, langs


def batch_loss(model: Seq2SeqModel, examples: Sequence[Example], layout: VocabLayout,
               lang_override: int | None = None) -> ag.Tensor:
    src, tgt_in, labels, langs = collate(examples, layout)
    if lang_override is not None:
        langs = np.full_like(langs, lang_override)
    logits = model.forward(src, tgt_in, langs, pad_id=layout.pad)
    return ag.cross_entropy(logits, labels, ignore_id=layout.pad)


def _token_nll(model: Seq2SeqModel, examples: Sequence[Example], layout: VocabLayout,
               chunk: int = 128) -> tuple[float, int]:
    total, count = 0.0, 0
    with ag.no_grad():
        for i in range(0, len(examples), chunk):
            part = examples[i : i + chunk]
            n = sum(len(e.target) for e in part)
            total += batch_loss(model, part, layout).item() * n
            count += n
    return total, count


def perplexity(model: Seq2SeqModel, heldout: Sequence[Example], lang: int, layout: VocabLayout) -> float:
    """exp of the token-averaged teacher-forced cross-entropy on ``lang``'s examples."""
    subset = [e for e in heldout if e.lang == lang]
    if not subset:
        raise Undetermined(f"no held-out examples for language {lang}")
    total, count = _token_nll(model, subset, layout)
    return math.exp(total / count)


class _Stream:
    """Endless reshuffled pass over one language's examples."""

    def __init__(self, examples: list[Example], rng: np.random.Generator):
        self.examples = examples
        self.rng = rng
        self.order: list[int] = []

    def take(self, n: int) -> list[Example]:
        out = []
        while len(out) < n:
            if not self.order:
                self.order = self.rng.permutation(len(self.examples)).tolist()
            out.append(self.examples[self.order.pop()])
        return out


def _streams(data: Sequence[Example], languages: Sequence[int], seed: int) -> dict[int, _Stream]:
    streams = {}
    for lang in languages:
        pool = [e for e in data if e.lang == lang]
        if not pool:
            raise DataCoverageError(f"language {lang} is absent from the training data")
        streams[lang] = _Stream(pool, np.random.default_rng([seed, 3, lang]))
    return streams


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    return cfg.lr


def _train(model, data, cfg, layout, trainable, languages, on_eval) -> None:
    streams = _streams(data, languages, cfg.seed)
    state = ag.OptimState(model.tensors())
    on_eval(0)
    for step in range(cfg.steps):
        lang = languages[step % len(languages)]
        if cfg.mixed_batches:
            # slot i of step s goes to language (s * B + i) mod n
            batch = []
            for i in range(cfg.batch_size):
                batch.extend(streams[languages[(step * cfg.batch_size + i) % len(languages)]].take(1))
        else:
            batch = streams[lang].take(cfg.batch_size)
        model.zero_grad()
        loss = batch_loss(model, batch, layout)
        if not math.isfinite(loss.item()):
            raise FloatingPointError(
                f"non-finite loss {loss.item()} at step {step} (language {lang}, lr {_lr_at(step, cfg)})"
            )
        ag.backward(loss)
        ag.adam_step(state, trainable, _lr_at(step, cfg))
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            on_eval(done)
    model.zero_grad()


def pretrain(model: Seq2SeqModel, corpus: Sequence[Example], heldout: Sequence[Example],
             cfg: TrainConfig, layout: VocabLayout) -> MetricsHistory:
    """Joint training of shared parameters and every language module."""
    languages = list(range(model.config.n_languages))
    for lang in languages:
        if not any(e.lang == lang for e in heldout):
            raise DataCoverageError(f"language {lang} is absent from the held-out data")
    history = MetricsHistory()
    trainable = build_mask(model, config_from_name("none"), Phase.PRETRAIN)

    def on_eval(step):
        for lang in languages:
            ppl = perplexity(model, heldout, lang, layout)
            history.add(step, Phase.PRETRAIN.value, lang, "perplexity", ppl)
        logger.info("pretrain step %d mean ppl %.4f", step,
                    np.mean([r.value for r in history.records if r.step == step]))

    _train(model, corpus, cfg, layout, trainable, languages, on_eval)
    return history


def finetune(model: Seq2SeqModel, task_data: Sequence[Example], dev: Sequence[Example],
             freeze_cfg: FreezeConfig, cfg: TrainConfig, layout: VocabLayout) -> MetricsHistory:
    """Train shared parameters outside ``freeze_cfg`` on the source languages.

    Language modules stay frozen.  The parameters at the eval point with the
    lowest mean source-language dev loss are restored at the end.
    """
    languages = list(cfg.languages)
    if not languages:
        raise ValueError("fine-tuning needs at least one source language")
    stray = {e.lang for e in task_data} - set(languages)
    if stray:
        raise DataCoverageError(f"task data contains languages {sorted(stray)} outside {languages}")
    history = MetricsHistory()
    trainable = build_mask(model, freeze_cfg, Phase.FINETUNE)
    best = {"loss": math.inf, "state": None}

    def on_eval(step):
        losses = []
        for lang in languages:
            subset = [e for e in dev if e.lang == lang]
            if not subset:
                raise DataCoverageError(f"no dev examples for source language {lang}")
            total, count = _token_nll(model, subset, layout)
            losses.append(total / count)
            history.add(step, Phase.FINETUNE.value, lang, "dev_loss", total / count)
        if np.mean(losses) < best["loss"]:
            best["loss"] = float(np.mean(losses))
            best["state"] = model.state_dict()

    _train(model, task_data, cfg, layout, trainable, languages, on_eval)
    if best["state"] is not None:
        model.load_state_dict(best["state"])
    return history
