"""Unsupervised logit adjustment for learning from biased data.

Submodules: :mod:`numgrad` (MLP autodiff and AdamW), :mod:`synthdata`
(biased synthetic tasks), :mod:`sslpre` (contrastive pretraining),
:mod:`biasproxy` (bias proxy and soft confusion matrix), :mod:`adjust`
(logit-adjusted training), :mod:`metrics` (group-robust scores) and
:mod:`harness` (pipelines, search, CLI).
"""
__version__ = "0.1.0"

from .adjust import AdjustSpec, LogitAdjustedClassifier, predict_debiased
from .biasproxy import BiasProxy, JointEstimate, soft_confusion
from .exceptions import CollapseError, ConfigurationError, DivergenceError, FormatError
from .metrics import group_balanced_accuracy, unsupervised_balanced_val, unsupervised_worst_group_val
from .numgrad import MlpModel
from .sslpre import AugConfig, ContrastiveEncoder, SslConfig

__all__ = [
    "AdjustSpec", "AugConfig", "BiasProxy", "CollapseError", "ConfigurationError",
    "ContrastiveEncoder", "DivergenceError", "FormatError", "JointEstimate",
    "LogitAdjustedClassifier", "MlpModel", "SslConfig", "group_balanced_accuracy",
    "predict_debiased", "soft_confusion", "unsupervised_balanced_val",
    "unsupervised_worst_group_val",
]
