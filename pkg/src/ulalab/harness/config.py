"""Experiment configuration: task presets, trial settings and search spaces.

A config file is JSON with up to four top-level keys::

    {
      "task":  {"preset": "colored", "beta": 0.01},      # TaskSpec fields
      "trial": {"mode": "ula", "eta": 1.0, "seed": 0},   # TrialConfig fields
      "space": {"lr": [1e-4, 1e-3], "eta": [1.0, 2.0]}, # lists of candidates
      "search": {"n_trials": 16, "parallelism": 2, "seed": 0}
    }

Unknown keys are rejected so typos fail loudly.
"""
import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..exceptions import ConfigurationError

MODES = ("erm", "sla", "ula")
PRETRAINS = ("ssl", "random", "supervised")
FINETUNES = ("full", "head")
VALIDATORS = ("balanced", "worst", "iid")


@dataclass(frozen=True)
class TaskSpec:
    """Dataset and pretraining settings shared by every trial on a task."""

    name: str = "colored"
    K: int = 10
    L: int = 10
    beta: float = 0.01
    C: int = 3
    n_train: int = 10000
    n_valid: int = 2000
    n_test: int = 5000
    noise: float = 0.3
    backdrop: float = 0.3
    hidden: tuple = (256, 128)
    ssl_epochs: int = 20
    ssl_checkpoint_every: int = 5
    ssl_temperature: float = 0.1
    ssl_lr: float = 1e-3
    ssl_batch: int = 256
    aug: dict = field(default_factory=lambda: {"crop_min_scale": 0.6, "tint_jitter": 0.1,
                                               "gray_prob": 0.0, "noise_std": 0.05, "flip_prob": 0.0})

    def __post_init__(self):
        if self.name not in ("colored", "grid"):
            raise ConfigurationError(f"unknown task {self.name!r}; expected 'colored' or 'grid'")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def data_key(self):
        keys = ["name", "K", "L", "n_train", "n_valid", "n_test", "noise"]
        keys += ["beta"] if self.name == "colored" else ["C", "backdrop"]
        return {k: getattr(self, k) for k in keys}

    def pretrain_key(self):
        return {"hidden": list(self.hidden), "ssl_epochs": self.ssl_epochs,
                "ssl_checkpoint_every": self.ssl_checkpoint_every,
                "ssl_temperature": self.ssl_temperature, "ssl_lr": self.ssl_lr,
                "ssl_batch": self.ssl_batch, "aug": dict(sorted(self.aug.items()))}

    def checkpoint_epochs(self):
        every = self.ssl_checkpoint_every
        return sorted({0, self.ssl_epochs, *range(every, self.ssl_epochs + 1, every)})


@dataclass(frozen=True)
class TrialConfig:
    """One end-to-end run.

    ``data_seed`` drives data generation and pretraining (None: use ``seed``),
    so a search can share them across trials. ``T_ssl`` None selects the last
    pretraining checkpoint.
    """

    task: str = "colored"
    seed: int = 0
    data_seed: int = None
    mode: str = "ula"
    pretrain: str = "ssl"
    proxy_pretrain: str = "ssl"
    finetune: str = "full"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    eta: float = 1.0
    tau: float = 1.0
    T_ssl: int = None
    T_stop: float = 10.0
    probe_lr: float = 1e-2
    batch: int = 256
    max_epochs: int = 30
    validator: str = "balanced"
    min_count: int = 1

    def __post_init__(self):
        checks = [("mode", MODES), ("pretrain", PRETRAINS), ("proxy_pretrain", PRETRAINS),
                  ("finetune", FINETUNES), ("validator", VALIDATORS)]
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.lr <= 0 or self.weight_decay < 0 or self.eta < 0 or self.tau <= 0:
            raise ConfigurationError("lr and tau must be positive; weight_decay and eta non-negative")
        if self.T_stop < 0 or self.max_epochs < 0 or self.batch <= 0:
            raise ConfigurationError("T_stop and max_epochs must be non-negative and batch positive")


PRESETS = {
    "colored": (TaskSpec(), TrialConfig()),
    "grid": (
        TaskSpec(name="grid", K=6, L=6, C=3, n_train=6000, n_valid=1000, n_test=3600, noise=0.1,
                 backdrop=0.3, ssl_epochs=30, ssl_checkpoint_every=10,
                 aug={"crop_min_scale": 0.7, "tint_jitter": 0.5, "gray_prob": 0.8,
                      "noise_std": 0.05, "flip_prob": 0.0}),
        TrialConfig(task="grid", finetune="head", lr=1e-2),
    ),
}

# desk-scale search space on the colored task
DEFAULT_SPACE = {
    "lr": [1e-4, 3e-4, 1e-3, 3e-3, 5e-3],
    "weight_decay": [0.0, 1e-4, 1e-3, 1e-2, 1e-1],
    "eta": [1.0, 1.25, 1.5, 2.0],
    "tau": [0.5, 1.0, 2.0],
    "T_ssl": [10, 15, 20],
    "T_stop": [1, 3, 10, 30],
}


def _coerce(cls, raw, what):
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {sorted(unknown)}")
    return dict(raw)


def task_spec(preset="colored", **overrides):
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown task preset {preset!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[preset][0], **_coerce(TaskSpec, overrides, "task"))


def trial_config(task="colored", **overrides):
    if task not in PRESETS:
        raise ConfigurationError(f"unknown task preset {task!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[task][1], **_coerce(TrialConfig, overrides, "trial"))


def check_space(space, base=None):
    """Validate a search space: each key a TrialConfig field with a non-empty list of values."""
    names = {f.name for f in fields(TrialConfig)}
    for key, values in space.items():
        if key not in names:
            raise ConfigurationError(f"search space key {key!r} is not a trial setting")
        if key == "seed":
            raise ConfigurationError("seeds are drawn by the search, not searched over")
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigurationError(f"search space entry {key!r} must be a non-empty list")
        if base is not None:
            for v in values:
                replace(base, **{key: v})
    return {k: list(v) for k, v in space.items()}


@dataclass
class ExperimentConfig:
    task: TaskSpec
    trial: TrialConfig
    space: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)


def load_config(path):
    """Parse a JSON experiment file into an :class:`ExperimentConfig`."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)


def parse_config(raw):
    unknown = set(raw) - {"task", "trial", "space", "search"}
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
    task_raw = dict(raw.get("task", {}))
    preset = task_raw.pop("preset", task_raw.get("name", "colored"))
    task = task_spec(preset, **task_raw)
    trial_raw = dict(raw.get("trial", {}))
    trial_raw.setdefault("task", preset)
    trial = trial_config(**trial_raw)
    space = check_space(raw.get("space", {}), trial)
    search = dict(raw.get("search", {}))
    bad = set(search) - {"n_trials", "parallelism", "seed"}
    if bad:
        raise ConfigurationError(f"unknown search keys: {sorted(bad)}")
    return ExperimentConfig(task, trial, space, search)


def config_to_dict(cfg):
    """Inverse of :func:`parse_config` (round-trips through JSON)."""
    task = asdict(cfg.task)
    task["hidden"] = list(task["hidden"])
    task["preset"] = task["name"]
    return {"task": task, "trial": asdict(cfg.trial), "space": cfg.space, "search": cfg.search}


def trial_from_dict(d):
    return TrialConfig(**_coerce(TrialConfig, d, "trial"))


def task_from_dict(d):
    d = dict(d)
    d.pop("preset", None)
    return TaskSpec(**_coerce(TaskSpec, d, "task"))


def as_dict(obj):
    d = dataclasses.asdict(obj)
    if "hidden" in d:
        d["hidden"] = list(d["hidden"])
    return d
