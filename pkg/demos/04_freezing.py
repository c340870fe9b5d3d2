"""Freezing parameter groups during fine-tuning, checked bit for bit."""

from modseq.experiment import RunConfig, build_model, generate_data
from modseq.freezing import CONFIG_NAMES, Phase, build_mask, config_from_name, mask_names, snapshot, verify_frozen
from modseq.training import TrainConfig, finetune

for name in CONFIG_NAMES:
    print(f"{name:>4}: {' '.join(sorted(config_from_name(name).frozen_groups)) or '(nothing)'}")

cfg = RunConfig().replace(model={"d_model": 32, "d_ff": 64, "d_bottleneck": 16},
                          data={"task_per_lang": 50, "dev_per_lang": 8})
data = generate_data(cfg)
model = build_model(cfg)

fc = config_from_name("s7")
trainable = mask_names(model, build_mask(model, fc, Phase.FINETUNE))
print(f"\ns7 leaves {len(trainable)} of {len(model.params)} tensors trainable; adapters are always frozen")

before = snapshot(model)
task = [e for e in data["task"] if e.lang == 0]
dev = [e for e in data["dev"] if e.lang == 0]
finetune(model, task, dev, fc, TrainConfig(steps=20, batch_size=8, eval_every=10, languages=[0]), cfg.layout)
report = verify_frozen(before, snapshot(model), trainable, stepped=True)
print("violations:", report.violations)
moved = [n for n in trainable if (before[n] != model.params[n].tensor.data).any()]
print(f"{len(moved)} trainable tensors moved, e.g. {sorted(moved)[:3]}")
