"""End to end at the default preset: pretrain, fine-tune on language 0, decode in the others.

Full fine-tuning (s1) lets the shared decoder drift toward the source
language; s7 freezes embeddings and decoder feed-forward blocks so the
language modules keep control of the output language.  The dense baseline
shares one adapter bank and answers in language 0 whatever it is given.
Takes a few minutes on one core.
"""

import time

from modseq.evaluation import format_report, greedy_decode
from modseq.experiment import (RunConfig, build_model, generate_data, run_evaluate, run_finetune, run_module_sweep,
                               run_pretrain, zero_shot_summary)
from modseq.synth import Undetermined, lid

cfg = RunConfig().replace(train={"finetune_steps": 1000})
data = generate_data(cfg)
probe = next(e for e in data["test"] if e.lang == 3)

for variant, freezes in (("modular", ("s1", "s7")), ("dense", ("s1",))):
    pretrained = build_model(cfg, variant)
    t = time.time()
    history = run_pretrain(cfg, data, pretrained)
    print(f"\n=== {variant}: pretrained in {time.time() - t:.0f}s, held-out perplexity",
          {k: round(v, 2) for k, v in history.final("perplexity").items()})
    for freeze in freezes:
        model = build_model(cfg, variant)
        model.load_state_dict(pretrained.state_dict())
        run_finetune(cfg, data, model, freeze)
        rows = run_evaluate(cfg, data, model)
        print(f"\n--- {variant} fine-tuned on language 0 with {freeze}")
        print(format_report(rows).split("\n\n")[-1])
        print("zero-shot target-language rate", round(zero_shot_summary(rows)["target_rate"], 3))
        out = greedy_decode(model, probe.input, 3, cfg.layout)
        try:
            detected = lid(out, cfg.layout)[0]
        except Undetermined:
            detected = None
        print("language 3 input ", probe.input)
        print("model output     ", out, "-> detected language", detected)
        if variant == "modular" and freeze == "s7":
            sweep = run_module_sweep(cfg, data, model)
            print("reserved language routed through each module, best first:", sweep.ranking)
