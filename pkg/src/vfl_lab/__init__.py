"""Vertical federated learning lab: split-network training, backdoor attacks
by malicious participants, and a masked-autoencoder inference-time defense."""

from vfl_lab.attacks import AttackPlan, BackdoorAttack
from vfl_lab.config import ExperimentConfig, config_digest, load_config
from vfl_lab.data import generate_synthetic, load_csv, partition_vertical
from vfl_lab.errors import ConfigurationError, DataError, NumericalError, ShapeError, VflLabError
from vfl_lab.experiment import EvalReport, eval_acc, eval_asr, run_pipeline, sweep
from vfl_lab.protocol import infer, new_session, train_vfl
from vfl_lab.vflip import VflipDefense, fit_thresholds, train_mae

__version__ = "0.1.0"

__all__ = [
    "AttackPlan",
    "BackdoorAttack",
    "ConfigurationError",
    "DataError",
    "EvalReport",
    "ExperimentConfig",
    "NumericalError",
    "ShapeError",
    "VflLabError",
    "VflipDefense",
    "config_digest",
    "eval_acc",
    "eval_asr",
    "fit_thresholds",
    "generate_synthetic",
    "infer",
    "load_config",
    "load_csv",
    "new_session",
    "partition_vertical",
    "run_pipeline",
    "sweep",
    "train_mae",
    "train_vfl",
]
