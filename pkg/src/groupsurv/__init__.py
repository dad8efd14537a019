"""Group-based survival prediction on patch bags with selective-scan encoders."""

__version__ = "0.1.0"

from .data import CohortManifest, PatchBag, SurvivalLabel, SynthConfig, generate_cohort, kfold_split, make_groups
from .errors import (ArgumentError, ConfigError, CorruptFileError, GroupSurvError, InvariantError, LoadError,
                     NumericError, UndefinedMetricError)
from .graph import SlideGraph, build_graph
from .metrics import c_index, km_curve, log_rank, stage_summary, stratify_median
from .model import GroupSurvModel, ModelConfig, load_checkpoint, save_checkpoint
from .survival import cox_loss, dt_loss, hybrid_loss
from .trainer import RunRecord, TrainConfig, evaluate_fold, run_ablation, train_fold

__all__ = [
    "ArgumentError", "CohortManifest", "ConfigError", "CorruptFileError", "GroupSurvError", "GroupSurvModel",
    "InvariantError", "LoadError", "ModelConfig", "NumericError", "PatchBag", "RunRecord", "SlideGraph",
    "SurvivalLabel", "SynthConfig", "TrainConfig", "UndefinedMetricError", "build_graph", "c_index", "cox_loss",
    "dt_loss", "evaluate_fold", "generate_cohort", "hybrid_loss", "kfold_split", "km_curve", "load_checkpoint",
    "log_rank", "make_groups", "run_ablation", "save_checkpoint", "stage_summary", "stratify_median",
    "train_fold",
]
