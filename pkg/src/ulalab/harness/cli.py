"""Command line interface: ``ulalab <subcommand> [options]``.

Exit status is 0 only when every requested run succeeded, 1 when a trial or
stage failed and 2 for invalid configuration.
"""
import argparse
import json
import logging
import os
import shutil
import sys

import numpy as np

from ..adjust import predict_debiased
from ..exceptions import ConfigurationError, FormatError
from ..metrics import group_balanced_accuracy
from ..numgrad import load_checkpoint
from ..synthdata import read_dataset
from .ablation import ablation_suite
from .config import DEFAULT_SPACE, ExperimentConfig, as_dict, load_config, task_spec, trial_config
from .pipeline import (ArtifactCache, ENV_OUT, out_root, run_pipeline, select_checkpoint,
                       stage_datagen, stage_pretrain, stage_probe)
from .report import report
from .search import SearchFailed, run_search

log = logging.getLogger("ulalab")


def _value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _experiment(args):
    """Config file (if any), then ``--task``/``--seed``/``--set`` overrides."""
    if args.config:
        exp = load_config(args.config)
    else:
        name = args.task or "colored"
        exp = ExperimentConfig(task_spec(name), trial_config(name))
    overrides = {}
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _value(val)
    if args.task and args.config and args.task != exp.task.name:
        raise ConfigurationError("--task conflicts with the task in the config file")
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        fields = {**exp.trial.__dict__, **overrides}
        exp.trial = trial_config(**{k: v for k, v in fields.items()})
    return exp


def _common(p):
    p.add_argument("--config", help="JSON experiment file")
    p.add_argument("--task", choices=["colored", "grid"], help="task preset (default colored)")
    p.add_argument("--seed", type=int, help="trial seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a trial setting, e.g. --set eta=1.5 (repeatable)")
    p.add_argument("--out", help=f"output root (default ${ENV_OUT} or ./ulalab_out)")


def _data(exp, root):
    cache = ArtifactCache(root)
    seed = exp.trial.seed if exp.trial.data_seed is None else exp.trial.data_seed
    key, splits = stage_datagen(exp.task, seed, cache)
    return cache, seed, key, splits


def cmd_datagen(args):
    exp = _experiment(args)
    root = out_root(args.out)
    cache, seed, key, splits = _data(exp, root)
    dest = os.path.join(root, "data", f"{exp.task.name}-s{seed}")
    os.makedirs(dest, exist_ok=True)
    for d in splits:
        shutil.copyfile(os.path.join(cache.path("datagen", key), f"{d.split}.ulad"),
                        os.path.join(dest, f"{d.split}.ulad"))
        print(f"{d.split}: {len(d)} samples -> {os.path.join(dest, d.split + '.ulad')}")
    return 0


def cmd_pretrain(args):
    exp = _experiment(args)
    root = out_root(args.out)
    cache, seed, key, (train, _, _) = _data(exp, root)
    kind = args.kind or exp.trial.pretrain
    cks = stage_pretrain(exp.task, kind, seed, key, train, cache)
    print(f"{kind} encoder checkpoints at epochs {sorted(cks)}")
    return 0


def cmd_probe(args):
    exp = _experiment(args)
    cfg = exp.trial
    root = out_root(args.out)
    cache, seed, key, (train, valid, _) = _data(exp, root)
    cks = stage_pretrain(exp.task, cfg.proxy_pretrain, seed, key, train, cache)
    epoch, enc = select_checkpoint(cks, None if cfg.proxy_pretrain == "random" else cfg.T_ssl)
    enc_key = {"kind": cfg.proxy_pretrain, "epoch": epoch, "data": key,
               "pretrain": exp.task.pretrain_key(), "seed": seed}
    _, proxy = stage_probe(cfg, enc, enc_key, train, cache)
    acc = float(np.mean(proxy.predict(valid.X) == valid.y))
    je = proxy.joint_estimate(train.X, train.y)
    print(f"probe on {cfg.proxy_pretrain} epoch {epoch}, T_stop={cfg.T_stop}: i.i.d. validation accuracy {acc:.4f}")
    print("estimated p(y | y_bias):")
    print(np.array2string(je.conditional, precision=3, suppress_small=True))
    return 0


def cmd_train(args):
    exp = _experiment(args)
    result = run_pipeline(exp.trial, exp.task, args.out, args.name)
    print(json.dumps({k: v for k, v in result.to_json().items() if k != "config"}, indent=2, default=str))
    return 0 if result.ok else 1


def cmd_eval(args):
    model, _ = load_checkpoint(args.model)
    test = read_dataset(args.data)
    rep = group_balanced_accuracy(lambda X: predict_debiased(model, X), test)
    if args.csv:
        rep.to_csv(args.csv)
    print(f"balanced {rep.balanced:.4f}  worst {rep.worst:.4f}  iid {rep.iid:.4f}")
    if rep.empty_cells:
        print(f"empty cells (excluded): {rep.empty_cells}")
    return 0


def cmd_search(args):
    exp = _experiment(args)
    space = exp.space or DEFAULT_SPACE
    n = args.n_trials or exp.search.get("n_trials", 16)
    par = args.parallelism or exp.search.get("parallelism", 1)
    root = out_root(args.out)
    try:
        res = run_search(space, n, exp.trial, exp.task, os.path.join(root, args.name), par,
                         exp.search.get("seed", 0), cache_dir=root)
    except SearchFailed as exc:
        print(f"search failed: {exc}", file=sys.stderr)
        return 1
    failed = [r.trial for r in res.results if not r.ok]
    w = res.winner
    print(f"winner {w.trial}: val {w.best_val_score:.4f}, balanced test {w.balanced:.4f}")
    if failed:
        print(f"{len(failed)} failed trials: {failed}", file=sys.stderr)
    return 1 if failed else 0


def cmd_ablate(args):
    exp = _experiment(args)
    overrides = {k: v for k, v in exp.trial.__dict__.items()
                 if k not in ("task", "seed", "pretrain", "mode", "finetune")}
    task_overrides = {k: v for k, v in as_dict(exp.task).items() if k != "name"}
    root = out_root(args.out)
    res = ablation_suite(exp.task.name, args.seeds, args.pretrain, args.mode, args.finetune,
                         os.path.join(root, args.name), args.parallelism, task_overrides,
                         cache_dir=root, **overrides)
    with open(os.path.join(res.out_dir, "ablation.md")) as fh:
        print(fh.read())
    return 0 if all(r.ok for r in res.results) else 1


def cmd_report(args):
    paths = report(args.results_dir, args.dest)
    with open(paths["markdown"]) as fh:
        print(fh.read())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ulalab", description="Unsupervised logit adjustment experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate (or load cached) train/valid/test splits")
    _common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("pretrain", help="pretrain an encoder and store its checkpoints")
    _common(p)
    p.add_argument("--kind", choices=["ssl", "supervised", "random"])
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="train the bias proxy and print its conditional estimate")
    _common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("train", help="run one trial end to end")
    _common(p)
    p.add_argument("--name", help="trial directory name (default: config hash)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="group-balanced evaluation of a model checkpoint")
    p.add_argument("model", help="model checkpoint (.ck)")
    p.add_argument("data", help="dataset file (.ulad) carrying the bias attribute")
    p.add_argument("--csv", help="write the per-group table here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="random hyperparameter search")
    _common(p)
    p.add_argument("--n-trials", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--name", default="search", help="subdirectory of the output root")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("ablate", help="pretrain x mode x finetune ablation")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--pretrain", nargs="+", default=["ssl", "random"],
                   choices=["ssl", "random", "supervised"])
    p.add_argument("--mode", nargs="+", default=["erm", "sla", "ula"], choices=["erm", "sla", "ula"])
    p.add_argument("--finetune", nargs="+", choices=["full", "head"])
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--name", default="ablation", help="subdirectory of the output root")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarise results.csv files into tables")
    p.add_argument("results_dir")
    p.add_argument("--dest", help="output directory (default: results_dir)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
