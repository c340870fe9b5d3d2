"""Run configuration and the pretrain -> fine-tune -> evaluate pipeline.

A :class:`RunConfig` is read from a plain INI file with four sections::

    [model]       n_enc_layers, n_dec_layers, d_model, n_heads, d_ff, d_bottleneck, max_len
    [data]        n_languages, base_vocab, n_sentinels, seed, related_to, borrow_rate,
                  pretrain_per_lang, heldout_per_lang, task_per_lang, dev_per_lang,
                  test_per_lang, dir
    [train]       lr, warmup, batch_size, eval_every, pretrain_steps, finetune_steps, seed
    [experiment]  variant, freeze, source_languages, eval_languages

Every key is optional; missing keys take the desk-scale defaults below.
Lists are comma-separated integers.  ``related_to = -1`` disables the
planted relatedness of the reserved language.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import EvalRow, SweepReport, module_sweep, task_eval
from .freezing import CONFIG_NAMES, config_from_name
from .model import VARIANTS, ModelConfig, Seq2SeqModel
from .synth import (BigramGrammar, Example, SyntheticLanguage, VocabLayout, build_split, make_languages,
                    read_corpus, write_corpus)
from .training import MetricsHistory, TrainConfig, finetune, pretrain


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    d_bottleneck: int = 32
    max_len: int = 24


@dataclass
class DataSection:
    n_languages: int = 4
    base_vocab: int = 64
    n_sentinels: int = 8
    seed: int = 0
    related_to: int = 2
    borrow_rate: float = 0.75
    pretrain_per_lang: int = 3000
    heldout_per_lang: int = 64
    task_per_lang: int = 1000
    dev_per_lang: int = 64
    test_per_lang: int = 100
    dir: str = "data"


@dataclass
class TrainSection:
    lr: float = 1e-3
    warmup: int = 50
    batch_size: int = 16
    eval_every: int = 250
    pretrain_steps: int = 2000
    finetune_steps: int = 300
    seed: int = 0


@dataclass
class ExperimentSection:
    variant: str = "modular"
    freeze: str = "s1"
    source_languages: list[int] = field(default_factory=lambda: [0])
    eval_languages: list[int] = field(default_factory=lambda: [0, 1, 2, 3])


SECTIONS = {"model": ModelSection, "data": DataSection, "train": TrainSection, "experiment": ExperimentSection}


def _parse_value(kind, text: str):
    text = text.strip()
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    if kind in (str, "str"):
        return text
    return [int(x) for x in text.split(",") if x.strip()]


def _format_value(value) -> str:
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------ io

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(parser.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}; expected {sorted(SECTIONS)}")
        parts = {}
        for name, section_cls in SECTIONS.items():
            kinds = {f.name: f.type for f in fields(section_cls)}
            values = {}
            if parser.has_section(name):
                for key, raw in parser.items(name):
                    if key not in kinds:
                        raise ConfigError(f"unknown key {key!r} in [{name}]")
                    try:
                        values[key] = _parse_value(kinds[key], raw)
                    except ValueError as exc:
                        raise ConfigError(f"bad value for {name}.{key}: {raw!r}") from exc
            parts[name] = section_cls(**values)
        return cls(**parts)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_ini(text)

    def to_ini(self) -> str:
        """Canonical text form; ``from_ini(to_ini())`` is the identity."""
        out = []
        for name in SECTIONS:
            out.append(f"[{name}]")
            for f in fields(getattr(self, name)):
                out.append(f"{f.name} = {_format_value(getattr(getattr(self, name), f.name))}")
            out.append("")
        return "\n".join(out)

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(train={"seed": 3})``."""
        parts = {}
        for name in SECTIONS:
            current = getattr(self, name)
            parts[name] = dataclasses.replace(current, **sections.get(name, {}))
        return RunConfig(**parts)

    def with_seed(self, seed: int) -> "RunConfig":
        return self.replace(data={"seed": seed}, train={"seed": seed})

    # ------------------------------------------------------------ derived

    def validate(self) -> None:
        d, e = self.data, self.experiment
        if e.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {e.variant!r}")
        if e.freeze not in CONFIG_NAMES and e.freeze != "none":
            raise ConfigError(f"unknown freeze config {e.freeze!r}; valid: {', '.join(CONFIG_NAMES)}")
        if not e.source_languages:
            raise ConfigError("source_languages must be nonempty")
        for key in ("source_languages", "eval_languages"):
            bad = [x for x in getattr(e, key) if not 0 <= x < d.n_languages]
            if bad:
                raise ConfigError(f"{key} {bad} outside [0, {d.n_languages})")
        if d.related_to != -1 and not 0 <= d.related_to < d.n_languages:
            raise ConfigError(f"related_to={d.related_to} outside [0, {d.n_languages}) and not -1")
        if self.model.max_len < 12:
            raise ConfigError("max_len must be at least 12 so pivots of length 8 fit")
        for key in ("pretrain_per_lang", "heldout_per_lang", "task_per_lang", "dev_per_lang", "test_per_lang"):
            if getattr(d, key) <= 0:
                raise ConfigError(f"data.{key} must be positive")
        self.model_config()

    @property
    def layout(self) -> VocabLayout:
        return VocabLayout(self.data.base_vocab, self.data.n_languages + 1, self.data.n_sentinels)

    def model_config(self) -> ModelConfig:
        m = self.model
        try:
            return ModelConfig(
                n_languages=self.data.n_languages, n_enc_layers=m.n_enc_layers, n_dec_layers=m.n_dec_layers,
                d_model=m.d_model, n_heads=m.n_heads, d_ff=m.d_ff, d_bottleneck=m.d_bottleneck,
                vocab_size=self.layout.vocab_size, max_len=m.max_len,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def languages(self) -> list[SyntheticLanguage]:
        d = self.data
        related = None if d.related_to == -1 else d.related_to
        return make_languages(d.n_languages, d.base_vocab, d.seed, related_to=related, borrow_rate=d.borrow_rate)

    def grammar(self) -> BigramGrammar:
        return BigramGrammar.from_seed(self.data.seed, self.data.base_vocab)

    def pretrain_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, steps=t.pretrain_steps, batch_size=t.batch_size, seed=t.seed,
                           eval_every=t.eval_every, languages=list(range(self.data.n_languages)), warmup=t.warmup)

    def finetune_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, steps=t.finetune_steps, batch_size=t.batch_size, seed=t.seed,
                           eval_every=min(t.eval_every, max(t.finetune_steps, 1)),
                           languages=list(self.experiment.source_languages), warmup=t.warmup)


# ---------------------------------------------------------------- data

# split name -> (kind, independent stream id)
SPLITS = {
    "pretrain": ("pretrain", 0),
    "heldout": ("pretrain", 1),
    "task": ("task", 2),
    "dev": ("task", 3),
    "test": ("task", 4),
    "unseen": ("task", 5),
}


def generate_data(cfg: RunConfig) -> dict[str, list[Example]]:
    """All splits as pure functions of the data section."""
    d = cfg.data
    langs = cfg.languages()
    trained, reserved = langs[: d.n_languages], langs[d.n_languages :]
    counts = {"pretrain": d.pretrain_per_lang, "heldout": d.heldout_per_lang, "task": d.task_per_lang,
              "dev": d.dev_per_lang, "test": d.test_per_lang, "unseen": d.test_per_lang}
    grammar, layout = cfg.grammar(), cfg.layout
    out = {}
    for name, (kind, stream) in SPLITS.items():
        pool = reserved if name == "unseen" else trained
        out[name] = build_split(kind, pool, counts[name], d.seed, grammar, layout, cfg.model.max_len, stream)
    return out


def write_data(cfg: RunConfig, directory: str | Path, data: dict[str, list[Example]] | None = None) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create data directory {directory}: {exc.strerror}") from exc
    data = generate_data(cfg) if data is None else data
    paths = []
    for name, examples in data.items():
        path = directory / f"{name}.tsv"
        write_corpus(path, examples, cfg.layout, cfg.data.n_languages)
        paths.append(path)
    return paths


def load_data(cfg: RunConfig, directory: str | Path) -> dict[str, list[Example]]:
    directory = Path(directory)
    out = {}
    expected = cfg.layout.header(cfg.data.n_languages)
    for name in SPLITS:
        path = directory / f"{name}.tsv"
        if not path.exists():
            raise FileNotFoundError(f"missing corpus file {path}; run generate-data first")
        header, examples = read_corpus(path)
        first = path.read_text().split("\n", 1)[0]
        if first != expected:
            raise ConfigError(f"{path} was generated for a different layout: {first!r} vs {expected!r}")
        out[name] = examples
    return out


# ---------------------------------------------------------------- pipeline


def build_model(cfg: RunConfig, variant: str | None = None) -> Seq2SeqModel:
    return Seq2SeqModel(cfg.model_config(), variant or cfg.experiment.variant, seed=cfg.train.seed)


def run_pretrain(cfg: RunConfig, data: dict[str, list[Example]], model: Seq2SeqModel) -> MetricsHistory:
    return pretrain(model, data["pretrain"], data["heldout"], cfg.pretrain_config(), cfg.layout)


def run_finetune(cfg: RunConfig, data: dict[str, list[Example]], model: Seq2SeqModel,
                 freeze: str | None = None) -> MetricsHistory:
    src = set(cfg.experiment.source_languages)
    task = [e for e in data["task"] if e.lang in src]
    dev = [e for e in data["dev"] if e.lang in src]
    return finetune(model, task, dev, config_from_name(freeze or cfg.experiment.freeze),
                    cfg.finetune_config(), cfg.layout)


def run_evaluate(cfg: RunConfig, data: dict[str, list[Example]], model: Seq2SeqModel,
                 eval_languages: Sequence[int] | None = None) -> list[EvalRow]:
    langs = cfg.languages()
    rows = []
    for lang in cfg.experiment.eval_languages if eval_languages is None else eval_languages:
        examples = [e for e in data["test"] if e.lang == lang]
        scores = task_eval(model, examples, lang, langs, cfg.layout)
        rows.append(EvalRow(lang, lang not in cfg.experiment.source_languages, scores))
    return rows


def run_module_sweep(cfg: RunConfig, data: dict[str, list[Example]], model: Seq2SeqModel) -> SweepReport:
    return module_sweep(model, data["unseen"], cfg.languages(), cfg.layout)


def zero_shot_summary(rows: Sequence[EvalRow]) -> dict[str, float]:
    """Mean metrics over zero-shot rows (NaN when there are none)."""
    zs = [r.scores for r in rows if r.zero_shot]
    if not zs:
        return {"target_rate": float("nan"), "meaning": float("nan"), "exact_match": float("nan")}
    return {
        "target_rate": float(np.mean([s.target_rate for s in zs])),
        "meaning": float(np.mean([s.meaning for s in zs])),
        "exact_match": float(np.mean([s.exact_match for s in zs])),
    }


BOTTLENECK_RATIOS = (1 / 8, 1 / 4, 1 / 2, 1)


@dataclass
class SweepRow:
    label: str
    values: dict[str, float]


def freeze_sweep(cfg: RunConfig, data: dict[str, list[Example]], pretrained: Seq2SeqModel,
                 names: Sequence[str] = CONFIG_NAMES) -> list[SweepRow]:
    """Fine-tune a copy of ``pretrained`` under every freeze config and evaluate it."""
    state = pretrained.state_dict()
    rows = []
    for name in names:
        model = Seq2SeqModel(pretrained.config, pretrained.variant, pretrained.seed)
        model.load_state_dict(state)
        history = run_finetune(cfg, data, model, name)
        evals = run_evaluate(cfg, data, model)
        source = [r.scores.exact_match for r in evals if not r.zero_shot]
        values = {f"zero_shot_{k}": v for k, v in zero_shot_summary(evals).items()}
        values["source_exact_match"] = float(np.mean(source)) if source else float("nan")
        values["best_dev_loss"] = min(r.value for r in history.records)
        rows.append(SweepRow(name, values))
    return rows


def bottleneck_sweep(cfg: RunConfig, data: dict[str, list[Example]],
                     ratios: Sequence[float] = BOTTLENECK_RATIOS) -> list[SweepRow]:
    """Pretrain, fine-tune and evaluate once per bottleneck width ``ratio * d_model``."""
    rows = []
    for ratio in ratios:
        width = max(1, int(round(ratio * cfg.model.d_model)))
        sub = cfg.replace(model={"d_bottleneck": width})
        model = build_model(sub)
        history = run_pretrain(sub, data, model)
        run_finetune(sub, data, model)
        evals = run_evaluate(sub, data, model)
        values = {"d_bottleneck": float(width),
                  "perplexity": float(np.mean(list(history.final("perplexity").values())))}
        values.update({f"zero_shot_{k}": v for k, v in zero_shot_summary(evals).items()})
        rows.append(SweepRow(f"{ratio:g}", values))
    return rows
