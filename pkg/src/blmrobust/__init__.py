"""Preprocessing-aware adversarial robustness for a sliding-window BLM classifier."""

from .attack import (
    ALL_KINDS,
    AttackConfigKind,
    PgdConfig,
    RobustnessReport,
    evaluate_dataset,
    pipeline_check,
    reconstruct_to_signal,
    run_config,
)
from .data import GenParams, demo_trace, generate_scan, make_dataset, read_dataset, write_dataset
from .errors import BlmRobustError, ValidationError
from .model import ArchConfig, build_model, load_weights, save_weights
from .pipeline import classify, classify_batch, preprocess, znormalize
from .report import render_markdown, summarize
from .sequence import (
    is_extendable_under_attack,
    maximal_adv_sequence_under_attack,
    sequence_attack,
    smoothness,
)
from .threat import StructuredBudget, admissibility_check, infeasibility_witness
from .training import TrainConfig, finetune_adversarial, train_clean

__version__ = "0.1.0"
