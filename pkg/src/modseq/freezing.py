"""Named freeze configurations and the trainability masks they induce."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .model import ADAPTER_GROUPS, SHARED_GROUPS, Seq2SeqModel

FREEZABLE = ("Emb", "Enc_LN", "Dec_LN", "Dec_Att", "Dec_CrossAtt", "Dec_FFN")

# rows of the freezing-combinations table; listed groups are frozen
FREEZE_TABLE: dict[str, frozenset[str]] = {
    "s1": frozenset(),
    "s2": frozenset({"Enc_LN", "Dec_LN"}),
    "s3": frozenset({"Emb"}),
    "s4": frozenset({"Emb", "Enc_LN", "Dec_LN"}),
    "s5": frozenset({"Emb", "Dec_LN", "Dec_Att", "Dec_CrossAtt", "Dec_FFN"}),
    "s6": frozenset({"Emb", "Dec_LN", "Dec_CrossAtt", "Dec_FFN"}),
    "s7": frozenset({"Emb", "Dec_LN", "Dec_FFN"}),
    "s8": frozenset({"Enc_LN", "Dec_LN", "Dec_CrossAtt", "Dec_FFN"}),
    "s9": frozenset({"Enc_LN", "Dec_LN", "Dec_FFN"}),
    "s10": frozenset({"Emb", "Enc_LN", "Dec_LN", "Dec_CrossAtt", "Dec_FFN"}),
    "s11": frozenset({"Dec_LN", "Dec_CrossAtt", "Dec_FFN"}),
    "s12": frozenset({"Dec_LN", "Dec_Att", "Dec_FFN"}),
    "s13": frozenset({"Dec_LN", "Dec_FFN"}),
    "s14": frozenset({"Emb", "Enc_LN", "Dec_LN", "Dec_FFN"}),
}
CONFIG_NAMES = tuple(FREEZE_TABLE)


class Phase(enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class LabelingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FreezeConfig:
    name: str
    frozen_groups: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        bad = set(self.frozen_groups) - set(FREEZABLE)
        if bad:
            raise ValueError(f"groups {sorted(bad)} cannot be frozen; choose from {FREEZABLE}")


def config_from_name(name: str) -> FreezeConfig:
    if name == "none":
        return FreezeConfig("none")
    try:
        return FreezeConfig(name, FREEZE_TABLE[name])
    except KeyError:
        raise KeyError(f"unknown freeze config {name!r}; valid names: {', '.join(CONFIG_NAMES)}, none") from None


def build_mask(model: Seq2SeqModel, cfg: FreezeConfig, phase: Phase) -> set[int]:
    """Ids of the parameter tensors the optimiser may update."""
    trainable = set()
    for p in model.params.values():
        if p.group not in SHARED_GROUPS and p.group not in ADAPTER_GROUPS:
            raise LabelingError(f"parameter {p.name} carries unknown group label {p.group!r}")
        if phase is Phase.PRETRAIN:
            trainable.add(id(p.tensor))
        elif p.group in SHARED_GROUPS and p.group not in cfg.frozen_groups:
            trainable.add(id(p.tensor))
    return trainable


def snapshot(model: Seq2SeqModel) -> dict[str, np.ndarray]:
    return model.state_dict()


@dataclass
class FrozenReport:
    violations: list[str]
    idle: list[str]  # trainable but unchanged; warning only

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_frozen(before: dict[str, np.ndarray], after: dict[str, np.ndarray],
                  trainable_names: set[str], stepped: bool = False) -> FrozenReport:
    """Compare two snapshots against the set of names that were allowed to move.

    ``stepped`` says at least one non-zero-gradient step happened, which makes
    unchanged trainable tensors worth a warning.
    """
    if set(before) != set(after):
        raise LabelingError("snapshots cover different parameter sets")
    violations, idle = [], []
    for name in before:
        a, b = before[name], after[name]
        if a.shape != b.shape:
            raise LabelingError(f"snapshot shapes differ for {name}")
        same = a.tobytes() == b.tobytes()
        if name not in trainable_names and not same:
            violations.append(name)
        elif name in trainable_names and same and stepped:
            idle.append(name)
    return FrozenReport(violations, idle)


def mask_names(model: Seq2SeqModel, trainable: set[int]) -> set[str]:
    return {name for name, p in model.params.items() if id(p.tensor) in trainable}
