"""End-to-end pipeline: datagen, pretraining, probe, finetuning, evaluation.

Every stage except evaluation stores its artifacts under
``<root>/cache/<stage>/<key>`` where ``key`` hashes the stage inputs and the
code version, so repeated runs and search trials share the expensive work.
Entries are written into a temporary directory and renamed into place.
"""
import csv
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .. import __version__
from ..adjust import LogitAdjustedClassifier, predict_debiased, write_curve
from ..biasproxy import BiasProxy
from ..exceptions import ConfigurationError
from ..metrics import group_balanced_accuracy
from ..numgrad import (LrSchedule, MlpModel, OptimState, adamw_step, backward,
                       ce_loss_with_offset, forward, load_checkpoint, lr_at, save_checkpoint)
from ..rng import substream, subseed
from ..sslpre import AugConfig, SslConfig, pretrain_encoder
from ..synthdata import gen_colored_task, gen_systematic_split, read_dataset, write_dataset
from .._train import minibatches, steps_per_epoch
from .config import TrialConfig, as_dict, task_spec

log = logging.getLogger(__name__)

CODE_VERSION = f"ulalab-{__version__}"
ENV_OUT = "ULALAB_OUT"

RESULT_COLUMNS = [
    "trial", "status", "task", "seed", "data_seed", "mode", "pretrain", "proxy_pretrain", "finetune", "lr",
    "weight_decay", "eta", "tau", "T_ssl", "T_stop", "probe_lr", "batch", "max_epochs",
    "validator", "min_count", "best_val_score", "best_epoch", "balanced", "worst", "iid",
    "wall_clock", "failed_stage", "error",
]


def out_root(path=None):
    """Output root: explicit path, else ``$ULALAB_OUT``, else ``./ulalab_out``."""
    return os.path.abspath(path or os.environ.get(ENV_OUT) or "ulalab_out")


def content_hash(stage, payload):
    blob = json.dumps({"stage": stage, "code": CODE_VERSION, "inputs": payload},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:20]


class ArtifactCache:
    """Directory-per-entry cache with atomic publication."""

    def __init__(self, root, enabled=True):
        self.root = os.path.join(root, "cache")
        self.enabled = enabled
        self.hits = []
        self.misses = []

    def path(self, stage, key):
        return os.path.join(self.root, stage, key)

    def lookup(self, stage, key):
        p = self.path(stage, key)
        if self.enabled and os.path.isdir(p):
            self.hits.append(stage)
            return p
        self.misses.append(stage)
        return None

    def publish(self, stage, key, writer):
        """Run ``writer(tmpdir)`` and rename the result to the entry path."""
        final = self.path(stage, key)
        os.makedirs(os.path.dirname(final), exist_ok=True)
        tmp = tempfile.mkdtemp(prefix=f".{key}-", dir=os.path.dirname(final))
        try:
            writer(tmp)
            try:
                os.rename(tmp, final)
            except OSError:
                if not os.path.isdir(final):
                    raise
                # a concurrent worker published the same entry first
                shutil.rmtree(tmp, ignore_errors=True)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return final


# ---------------------------------------------------------------------------
# stages


def generate_task(task, seed):
    """``(train, valid, test)`` for a task spec."""
    if task.name == "colored":
        return gen_colored_task(task.K, task.beta, task.n_train, task.n_valid, task.n_test,
                                noise=task.noise, seed=seed)
    if task.K != task.L:
        raise ConfigurationError("the grid task needs K == L")
    train, valid, test, _ = gen_systematic_split(task.K, task.L, task.C, task.n_train, task.n_valid,
                                                 task.n_test, noise=task.noise, seed=seed,
                                                 backdrop=task.backdrop)
    return train, valid, test


def stage_datagen(task, seed, cache):
    key = content_hash("datagen", {"task": task.data_key(), "seed": seed})
    path = cache.lookup("datagen", key)
    if path is None:
        splits = generate_task(task, seed)

        def write(tmp):
            for d in splits:
                write_dataset(d, os.path.join(tmp, f"{d.split}.ulad"))
        path = cache.publish("datagen", key, write)
    return key, tuple(read_dataset(os.path.join(path, f"{s}.ulad")) for s in ("train", "valid", "test"))


def supervised_pretrain(X, y, K, sizes, epochs, checkpoint_every, lr, batch, seed):
    """End-to-end ERM on target labels; encoder snapshots keyed by epoch."""
    net = MlpModel.initialize(tuple(sizes) + (K,), seed=subseed(seed, "init", "supervised"),
                              dtype=np.float32)
    n_enc = len(sizes) - 1
    checkpoints = {0: net.split(n_enc)[0]}
    n = X.shape[0]
    state = OptimState.for_model(net, lr, 1e-4)
    sched = LrSchedule(lr, max(1, epochs * steps_per_epoch(n, batch)))
    rng = substream(seed, "shuffle", "supervised")
    step = 0
    for epoch in range(1, epochs + 1):
        for idx in minibatches(n, batch, rng):
            logits, ctx = forward(net, X[idx], return_context=True)
            _, dlogits = ce_loss_with_offset(logits, None, y[idx])
            adamw_step(net, state, backward(net, ctx, dlogits), lr_at(sched, step))
            step += 1
        if epoch % checkpoint_every == 0 or epoch == epochs:
            checkpoints[epoch] = net.split(n_enc)[0]
    return checkpoints


def stage_pretrain(task, kind, seed, data_key, train, cache):
    """Encoder checkpoints ``{epoch: MlpModel}`` for ``kind`` in ssl/random/supervised."""
    sizes = (train.X.shape[1],) + tuple(task.hidden)
    if kind == "random":
        enc = MlpModel.initialize(sizes, seed=subseed(seed, "init", "encoder"), dtype=np.float32)
        return {0: enc.astype(np.float32)}
    key = content_hash("pretrain", {"kind": kind, "data": data_key, "seed": seed,
                                    "pretrain": task.pretrain_key()})
    path = cache.lookup("pretrain", key)
    if path is None:
        if kind == "ssl":
            cfg = SslConfig(temperature=task.ssl_temperature, epochs=task.ssl_epochs,
                            batch=task.ssl_batch, lr=task.ssl_lr,
                            checkpoint_every=task.ssl_checkpoint_every)
            cks = pretrain_encoder(train.X, sizes, cfg, AugConfig(**task.aug), seed)
        else:
            # the supervised baseline reads target labels only
            cks = supervised_pretrain(train.X, train.y, task.K, sizes, task.ssl_epochs,
                                      task.ssl_checkpoint_every, task.ssl_lr, task.ssl_batch, seed)

        def write(tmp):
            for epoch, enc in cks.items():
                save_checkpoint(enc, os.path.join(tmp, f"{kind}_epoch_{epoch}.ck"), step=epoch)
            with open(os.path.join(tmp, "index.json"), "w") as fh:
                json.dump({"kind": kind, "epochs": sorted(cks)}, fh)
        path = cache.publish("pretrain", key, write)
    with open(os.path.join(path, "index.json")) as fh:
        epochs = json.load(fh)["epochs"]
    return {e: load_checkpoint(os.path.join(path, f"{kind}_epoch_{e}.ck"))[0] for e in epochs}


def select_checkpoint(checkpoints, T_ssl):
    if T_ssl is None:
        return max(checkpoints), checkpoints[max(checkpoints)]
    if T_ssl not in checkpoints:
        raise ConfigurationError(f"no pretraining checkpoint at T_ssl={T_ssl}; have {sorted(checkpoints)}")
    return T_ssl, checkpoints[T_ssl]


def stage_probe(cfg, encoder, encoder_key, train, cache):
    # tau only calibrates predict_proba, so it is kept out of the cache key
    key = content_hash("probe", {"encoder": encoder_key, "T_stop": cfg.T_stop, "lr": cfg.probe_lr,
                                 "batch": cfg.batch, "seed": cfg.seed})
    path = cache.lookup("probe", key)
    if path is None:
        proxy = BiasProxy(encoder, T_stop=cfg.T_stop, lr=cfg.probe_lr, batch_size=cfg.batch,
                          tau=cfg.tau, random_state=cfg.seed).fit(train.X, train.y)
        path = cache.publish("probe", key, lambda tmp: proxy.save(tmp))
    proxy = BiasProxy.load(path)
    proxy.tau = cfg.tau
    return key, proxy


def stage_finetune(cfg, init_encoder, init_key, proxy, proxy_key, train, valid, cache):
    key = content_hash("finetune", {"trial": {k: v for k, v in as_dict(cfg).items()
                                              if k not in ("task", "data_seed")},
                                    "init": init_key, "proxy": proxy_key})
    path = cache.lookup("finetune", key)
    if path is None:
        clf = LogitAdjustedClassifier(
            mode=cfg.mode, eta=cfg.eta, encoder=init_encoder, lr=cfg.lr,
            weight_decay=cfg.weight_decay, max_epochs=cfg.max_epochs, batch_size=cfg.batch,
            head_only=cfg.finetune == "head", validator=cfg.validator, min_count=cfg.min_count,
            n_classes=int(train.K), random_state=cfg.seed)
        # sla is the bias-supervised baseline: the only training path that reads z
        bias = train.z if cfg.mode == "sla" else None
        clf.fit(train.X, train.y, proxy=proxy, bias=bias, X_valid=valid.X, y_valid=valid.y)
        meta = {"best_epoch": clf.best_epoch_, "best_score": clf.best_score_, "status": clf.status_,
                "message": clf.message_, "validator": clf.validator_used_}

        def write(tmp):
            save_checkpoint(clf.model_, os.path.join(tmp, "model.ck"), step=clf.best_epoch_)
            write_curve(clf.curve_, os.path.join(tmp, "curve.csv"))
            with open(os.path.join(tmp, "meta.json"), "w") as fh:
                json.dump(meta, fh, indent=2)
        path = cache.publish("finetune", key, write)
    model, _ = load_checkpoint(os.path.join(path, "model.ck"))
    with open(os.path.join(path, "meta.json")) as fh:
        meta = json.load(fh)
    return path, model, meta


# ---------------------------------------------------------------------------
# results


@dataclass
class TrialResult:
    config: TrialConfig
    status: str
    best_val_score: float = float("nan")
    best_epoch: int = -1
    balanced: float = float("nan")
    worst: float = float("nan")
    iid: float = float("nan")
    wall_clock: float = 0.0
    artifacts: dict = field(default_factory=dict)
    failed_stage: str = ""
    error: str = ""
    trial: str = ""
    cache_hits: list = field(default_factory=list)

    @property
    def ok(self):
        return self.status == "ok"

    def row(self):
        cfg = as_dict(self.config)
        values = {**cfg, "trial": self.trial, "status": self.status,
                  "best_val_score": self.best_val_score, "best_epoch": self.best_epoch,
                  "balanced": self.balanced, "worst": self.worst, "iid": self.iid,
                  "wall_clock": round(self.wall_clock, 3), "failed_stage": self.failed_stage,
                  "error": self.error}
        return [("" if values[c] is None else values[c]) for c in RESULT_COLUMNS]

    def to_json(self):
        d = {c: v for c, v in zip(RESULT_COLUMNS, self.row())}
        d["config"] = as_dict(self.config)
        d["artifacts"] = self.artifacts
        d["cache_hits"] = self.cache_hits
        return d

    @classmethod
    def from_json(cls, d):
        cfg = TrialConfig(**d["config"])
        num = lambda k: float(d[k]) if d[k] != "" else float("nan")
        return cls(cfg, d["status"], num("best_val_score"), int(d["best_epoch"]), num("balanced"),
                   num("worst"), num("iid"), float(d["wall_clock"]), d.get("artifacts", {}),
                   d["failed_stage"], d["error"], d["trial"], d.get("cache_hits", []))


def write_results_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow(r.row())


def read_results_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def trial_id(cfg):
    return content_hash("trial", as_dict(cfg))[:12]


def run_pipeline(cfg, task=None, out_dir=None, name=None, use_cache=True, cache_dir=None):
    """Run one trial end to end and return its :class:`TrialResult`.

    Stage failures do not raise: the result carries ``status == "failed"``
    and the name of the failing stage. Trial files go to
    ``<out_dir>/trials/<name>``; the cache lives in ``cache_dir`` (default
    ``out_dir``).
    """
    task = task or task_spec(cfg.task)
    root = out_root(out_dir)
    cache = ArtifactCache(cache_dir or root, enabled=use_cache)
    data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    name = name or trial_id(cfg)
    trial_dir = os.path.join(root, "trials", name)
    os.makedirs(trial_dir, exist_ok=True)
    result = TrialResult(cfg, "failed", trial=name)
    start = time.perf_counter()
    stage = "datagen"
    try:
        data_key, (train, valid, test) = stage_datagen(task, data_seed, cache)

        stage = "pretrain"
        needs_proxy = cfg.mode != "erm"
        kinds = {cfg.pretrain} | ({cfg.proxy_pretrain} if needs_proxy else set())
        encoders = {k: stage_pretrain(task, k, data_seed, data_key, train, cache) for k in sorted(kinds)}
        t_init, init_encoder = select_checkpoint(encoders[cfg.pretrain],
                                                 None if cfg.pretrain == "random" else cfg.T_ssl)
        init_key = {"kind": cfg.pretrain, "epoch": t_init, "data": data_key,
                    "pretrain": task.pretrain_key(), "seed": data_seed}

        proxy, proxy_key = None, None
        if needs_proxy:
            stage = "probe"
            t_proxy, proxy_encoder = select_checkpoint(
                encoders[cfg.proxy_pretrain], None if cfg.proxy_pretrain == "random" else cfg.T_ssl)
            enc_key = {"kind": cfg.proxy_pretrain, "epoch": t_proxy, "data": data_key,
                       "pretrain": task.pretrain_key(), "seed": data_seed}
            proxy_key, proxy = stage_probe(cfg, proxy_encoder, enc_key, train, cache)
            proxy_key = [proxy_key, cfg.tau]

        stage = "finetune"
        path, model, meta = stage_finetune(cfg, init_encoder, init_key, proxy, proxy_key, train, valid, cache)
        shutil.copyfile(os.path.join(path, "curve.csv"), os.path.join(trial_dir, "curve.csv"))
        result.best_val_score = float(meta["best_score"])
        result.best_epoch = int(meta["best_epoch"])
        result.artifacts = {"model": os.path.join(path, "model.ck"),
                            "curve": os.path.join(trial_dir, "curve.csv")}
        if meta["status"] != "ok":
            result.failed_stage, result.error = "finetune", meta["message"]
        else:
            stage = "eval"
            # evaluation is the one place where the test-time bias attribute is read
            report = group_balanced_accuracy(lambda X: predict_debiased(model, X), test)
            report.to_csv(os.path.join(trial_dir, "groups.csv"))
            result.artifacts["groups"] = os.path.join(trial_dir, "groups.csv")
            result.balanced, result.worst, result.iid = report.balanced, report.worst, report.iid
            if all(np.isfinite([result.best_val_score, result.balanced, result.worst, result.iid])):
                result.status = "ok"
            else:
                result.failed_stage, result.error = "eval", "non-finite metric"
    except Exception as exc:  # noqa: BLE001 - reported as a failed trial
        log.error("trial %s: stage '%s' failed: %s", name, stage, exc)
        result.failed_stage, result.error = stage, f"{type(exc).__name__}: {exc}"
    result.wall_clock = time.perf_counter() - start
    result.cache_hits = list(cache.hits)
    with open(os.path.join(trial_dir, "result.json"), "w") as fh:
        json.dump(result.to_json(), fh, indent=2, default=str)
    return result
