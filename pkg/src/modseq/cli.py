"""Command-line entry point: ``modseq <command>`` or ``python -m modseq <command>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .evaluation import format_report
from .experiment import (ConfigError, RunConfig, bottleneck_sweep, build_model, freeze_sweep, generate_data,
                         load_data, run_evaluate, run_finetune, run_module_sweep, run_pretrain, write_data)
from .freezing import config_from_name, mask_names, snapshot, verify_frozen, build_mask, Phase
from .model import VARIANTS
from .synth import Undetermined
from .training import DataCoverageError

logger = logging.getLogger("modseq")


def metrics_path(out: str | Path) -> Path:
    return Path(str(out) + ".metrics.tsv")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "variant", None):
        cfg = cfg.replace(experiment={"variant": args.variant})
    if getattr(args, "freeze", None):
        cfg = cfg.replace(experiment={"freeze": args.freeze})
    return cfg


def _load_model(cfg: RunConfig, path):
    ckpt = checkpoint.load(path)
    return checkpoint.restore(ckpt, cfg.experiment.variant, cfg.model_config())


def _emit(text: str, out) -> None:
    sys.stdout.write(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _table(rows, first: str) -> str:
    keys = list(rows[0].values)
    lines = ["\t".join(["row", first] + keys)]
    for r in rows:
        lines.append("\t".join(["row", r.label] + [repr(r.values[k]) for k in keys]))
    lines.append("")
    widths = [max(len(first), *(len(r.label) for r in rows))] + [max(len(k), 8) for k in keys]
    lines.append("  ".join(h.rjust(w) for h, w in zip([first] + keys, widths)))
    for r in rows:
        cells = [r.label] + [f"{r.values[k]:.4f}" for k in keys]
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    paths = write_data(cfg, args.out or cfg.data.dir)
    for p in paths:
        print(p)
    return 0


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out PATH for the output checkpoint")
    return Path(args.out)


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    data = load_data(cfg, cfg.data.dir)
    model = _load_model(cfg, args.checkpoint) if args.checkpoint else build_model(cfg)
    history = run_pretrain(cfg, data, model)
    checkpoint.save(out, model, cfg.to_ini())
    metrics_path(out).write_text(history.text())
    final = history.final("perplexity")
    print("\t".join(f"lang{k}={v:.4f}" for k, v in sorted(final.items())))
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    if not args.checkpoint:
        raise ConfigError("finetune needs --checkpoint PATH of a pretrained model")
    data = load_data(cfg, cfg.data.dir)
    model = _load_model(cfg, args.checkpoint)
    trainable = mask_names(model, build_mask(model, config_from_name(cfg.experiment.freeze), Phase.FINETUNE))
    before = snapshot(model)
    history = run_finetune(cfg, data, model)
    report = verify_frozen(before, snapshot(model), trainable, stepped=cfg.train.finetune_steps > 0)
    checkpoint.save(out, model, cfg.to_ini())
    metrics_path(out).write_text(history.text())
    if report.violations:
        print(f"error: frozen parameters changed: {report.violations}", file=sys.stderr)
        return 1
    for name in report.idle:
        logger.warning("trainable parameter %s did not change", name)
    print(f"freeze={cfg.experiment.freeze} violations=0 best_dev_loss="
          f"{min(r.value for r in history.records):.6f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint PATH")
    data = load_data(cfg, cfg.data.dir)
    model = _load_model(cfg, args.checkpoint)
    _emit(format_report(run_evaluate(cfg, data, model)), args.out)
    return 0


def cmd_sweep_freeze(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("sweep-freeze needs --checkpoint PATH of a pretrained model")
    data = load_data(cfg, cfg.data.dir)
    model = _load_model(cfg, args.checkpoint)
    _emit(_table(freeze_sweep(cfg, data, model), "freeze"), args.out)
    return 0


def cmd_sweep_bottleneck(args) -> int:
    cfg = _config(args)
    data = load_data(cfg, cfg.data.dir)
    rows = bottleneck_sweep(cfg, data)
    scores = [r.values["zero_shot_meaning"] for r in rows]
    text = _table(rows, "ratio") + f"spread\tzero_shot_meaning\t{max(scores) - min(scores)!r}\n"
    _emit(text, args.out)
    return 0


def cmd_sweep_modules(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("sweep-modules needs --checkpoint PATH")
    data = load_data(cfg, cfg.data.dir)
    model = _load_model(cfg, args.checkpoint)
    report = run_module_sweep(cfg, data, model)
    _emit("\n".join(report.lines()) + "\n", args.out)
    return 0


COMMANDS = {
    "generate-data": (cmd_generate_data, "write the synthetic corpus splits"),
    "pretrain": (cmd_pretrain, "span-corruption pretraining of shared parameters and modules"),
    "finetune": (cmd_finetune, "fine-tune on the source languages under a freeze config"),
    "evaluate": (cmd_evaluate, "decode the test split for every eval language"),
    "sweep-freeze": (cmd_sweep_freeze, "fine-tune and evaluate under s1..s14"),
    "sweep-bottleneck": (cmd_sweep_bottleneck, "pretrain and evaluate at four bottleneck widths"),
    "sweep-modules": (cmd_sweep_modules, "route the reserved language through every module"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modseq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="INI run config (default: built-in preset)")
        p.add_argument("--checkpoint", metavar="PATH", help="input checkpoint")
        p.add_argument("--out", metavar="PATH", help="output checkpoint, directory or report")
        p.add_argument("--seed", type=int, help="override the data and training seeds")
        p.add_argument("--freeze", metavar="NAME", help="freeze config s1..s14 or none")
        p.add_argument("--variant", choices=VARIANTS)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except (ConfigError, checkpoint.CheckpointError, DataCoverageError, Undetermined, KeyError,
            FileNotFoundError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
