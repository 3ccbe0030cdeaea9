"""Cross-product ablations over pretraining, training mode and finetuning depth."""
import csv
import itertools
import os
from dataclasses import dataclass

from .config import FINETUNES, MODES, PRETRAINS, task_spec, trial_config
from .pipeline import out_root, write_results_csv
from .report import mean_std
from .search import run_trials


@dataclass
class AblationResult:
    results: list
    table: dict  # (pretrain, finetune, mode) -> (mean balanced, std, n ok)
    out_dir: str

    def mean(self, pretrain, mode, finetune):
        return self.table[(pretrain, finetune, mode)][0]


def ablation_suite(task="grid", seeds=(0,), pretrains=("ssl", "random"), modes=MODES,
                   finetunes=None, out_dir=None, parallelism=1, task_overrides=None, cache_dir=None,
                   **trial_overrides):
    """Run every ``pretrain x mode x finetune`` cell for each seed.

    ``finetunes`` defaults to the task preset's finetuning depth. All cells
    of one seed share the generated data and the pretrained encoder, cached
    under ``cache_dir`` (default ``out_dir``).
    """
    for name, values, allowed in (("pretrain", pretrains, PRETRAINS), ("mode", modes, MODES),
                                  ("finetune", finetunes or (), FINETUNES)):
        bad = set(values) - set(allowed)
        if bad:
            raise ValueError(f"unknown {name} values {sorted(bad)}")
    spec = task_spec(task, **(task_overrides or {}))
    base = trial_config(task, **trial_overrides)
    finetunes = tuple(finetunes or (base.finetune,))
    configs, names = [], []
    for seed, pretrain, finetune, mode in itertools.product(seeds, pretrains, finetunes, modes):
        configs.append(trial_config(task, **{**trial_overrides, "seed": seed, "pretrain": pretrain,
                                             "finetune": finetune, "mode": mode}))
        names.append(f"s{seed}-{pretrain}-{finetune}-{mode}")
    root = out_root(out_dir)
    os.makedirs(root, exist_ok=True)
    results = run_trials(configs, spec, root, names, parallelism, cache_dir)
    write_results_csv(results, os.path.join(root, "results.csv"))

    table = {}
    for pretrain, finetune, mode in itertools.product(pretrains, finetunes, modes):
        scores = [r.balanced for r in results if r.ok and r.config.pretrain == pretrain
                  and r.config.finetune == finetune and r.config.mode == mode]
        table[(pretrain, finetune, mode)] = (*mean_std(scores), len(scores)) if scores else (float("nan"), None, 0)
    _write_tables(table, pretrains, finetunes, modes, root)
    return AblationResult(results, table, root)


def _write_tables(table, pretrains, finetunes, modes, root):
    with open(os.path.join(root, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pretrain", "finetune", "mode", "n", "balanced_mean", "balanced_std"])
        for (p, f, m), (mean, std, n) in table.items():
            w.writerow([p, f, m, n, mean, "" if std is None else std])
    lines = ["| pretrain | finetune | " + " | ".join(modes) + " |",
             "|---|---|" + "---|" * len(modes)]
    for p, f in itertools.product(pretrains, finetunes):
        cells = []
        for m in modes:
            mean, std, n = table[(p, f, m)]
            cells.append("failed" if n == 0 else f"{100 * mean:.2f}" + ("" if std is None else f" ± {100 * std:.2f}"))
        lines.append(f"| {p} | {f} | " + " | ".join(cells) + " |")
    with open(os.path.join(root, "ablation.md"), "w") as fh:
        fh.write("# Ablation: group-balanced test accuracy (%)\n\n" + "\n".join(lines) + "\n")
