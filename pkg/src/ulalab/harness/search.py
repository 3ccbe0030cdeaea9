"""Seeded random hyperparameter search and shared trial execution."""
import json
import logging
import multiprocessing
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from ..rng import substream
from .config import TrialConfig, as_dict, check_space, task_spec
from .pipeline import (ArtifactCache, out_root, run_pipeline, stage_datagen, stage_pretrain,
                       write_results_csv)

log = logging.getLogger(__name__)


class SearchFailed(RuntimeError):
    """Every trial of a search failed."""


@dataclass
class SearchResult:
    results: list
    winner: object
    out_dir: str


def draw_configs(space, n_trials, base, search_seed=0):
    """``n_trials`` independent uniform draws from ``space`` on top of ``base``.

    Trial ``i`` gets seed ``base.seed + i``; data generation and pretraining
    stay on one shared seed so every trial reuses the same encoder.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    space = check_space(space, base)
    rng = substream(search_seed, "search")
    data_seed = base.seed if base.data_seed is None else base.data_seed
    configs = []
    for i in range(n_trials):
        values = {k: space[k][int(rng.integers(len(space[k])))] for k in sorted(space)}
        configs.append(replace(base, seed=base.seed + i, data_seed=data_seed, **values))
    return configs


def prepare_shared(configs, task, cache_root):
    """Run datagen and pretraining once in this process before workers fan out."""
    cache = ArtifactCache(cache_root)
    done = set()
    for cfg in configs:
        data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
        kinds = {cfg.pretrain} | ({cfg.proxy_pretrain} if cfg.mode != "erm" else set())
        for kind in kinds - {"random"}:
            if (data_seed, kind) in done:
                continue
            data_key, (train, _, _) = stage_datagen(task, data_seed, cache)
            stage_pretrain(task, kind, data_seed, data_key, train, cache)
            done.add((data_seed, kind))


def _run_job(job):
    cfg, task, out_dir, name, cache_dir = job
    return run_pipeline(cfg, task, out_dir, name, cache_dir=cache_dir)


def run_trials(configs, task, out_dir, names, parallelism=1, cache_dir=None):
    """Run trials in order (or in a process pool) and return their results in order."""
    jobs = [(cfg, task, out_dir, name, cache_dir) for cfg, name in zip(configs, names)]
    if parallelism <= 1 or len(jobs) == 1:
        return [_run_job(j) for j in jobs]
    try:
        prepare_shared(configs, task, cache_dir or out_dir)
    except Exception as exc:  # noqa: BLE001 - each trial will report the failing stage
        log.warning("shared stage preparation failed: %s", exc)
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=parallelism, mp_context=ctx) as pool:
        return list(pool.map(_run_job, jobs))


def select_winner(results):
    """Best validation score among ok trials; ties go to the earliest trial."""
    ok = [(i, r) for i, r in enumerate(results) if r.ok]
    if not ok:
        raise SearchFailed(f"all {len(results)} trials failed")
    best = max(r.best_val_score for _, r in ok)
    tied = [i for i, r in ok if r.best_val_score == best]
    if len(tied) > 1:
        log.info("validation score tie between trials %s; keeping trial %d", tied, tied[0])
    return results[tied[0]]


def write_scatter(results, path):
    with open(path, "w") as fh:
        fh.write("trial,best_val_score,balanced,worst,iid\n")
        for r in results:
            if r.ok:
                fh.write(f"{r.trial},{r.best_val_score!r},{r.balanced!r},{r.worst!r},{r.iid!r}\n")


def run_search(space, n_trials, base=None, task=None, out_dir=None, parallelism=1, search_seed=0,
               cache_dir=None):
    """Random search; writes ``results.csv``, ``curve_{trial}.csv`` and ``scatter.csv``.

    Failed trials stay in the result list and in ``results.csv``. Raises
    :class:`SearchFailed` (after writing the files) if no trial succeeded.
    """
    base = base or TrialConfig()
    task = task or task_spec(base.task)
    root = out_root(out_dir)
    os.makedirs(root, exist_ok=True)
    configs = draw_configs(space, n_trials, base, search_seed)
    names = [f"t{i:03d}" for i in range(n_trials)]
    results = run_trials(configs, task, root, names, parallelism, cache_dir)

    write_results_csv(results, os.path.join(root, "results.csv"))
    for r in results:
        curve = os.path.join(root, "trials", r.trial, "curve.csv")
        if os.path.exists(curve):
            shutil.copyfile(curve, os.path.join(root, f"curve_{r.trial}.csv"))
    write_scatter(results, os.path.join(root, "scatter.csv"))
    summary = {"space": space, "n_trials": n_trials, "search_seed": search_seed,
               "base": as_dict(base), "failed": [r.trial for r in results if not r.ok]}
    try:
        winner = select_winner(results)
        summary["winner"] = winner.trial
    finally:
        with open(os.path.join(root, "search.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
    return SearchResult(results, winner, root)
