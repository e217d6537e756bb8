"""Inter-expert pruning and intra-expert low-rank decomposition for Mixture-of-Experts models."""
from .calibration import CalibrationSet, make_calibration
from .checkpoint import load_checkpoint, save_checkpoint
from .importance import ImportanceReport, PruneBudget, allocate_prune_budget, expert_importance
from .lowrank import RankPlan, allocate_ranks, apply_decomposition, capture_activations, decompose_matrix
from .model import ModelConfig, MoEModel, expert_param_count, forward, lm_loss, random_init, total_param_count
from .pipeline import PipelineConfig, evaluate_perplexity, pretrain_teacher, run_pipeline
from .prune import PruningPlan, SearchParams, apply_pruning, brute_force_search, genetic_search, plan_pruning
from .recover import TrainConfig, attach_adapters, distill_loss, finetune, merge_adapters

__version__ = "0.1.0"

__all__ = [
    "CalibrationSet",
    "ImportanceReport",
    "ModelConfig",
    "MoEModel",
    "PipelineConfig",
    "PruneBudget",
    "PruningPlan",
    "RankPlan",
    "SearchParams",
    "TrainConfig",
    "allocate_prune_budget",
    "allocate_ranks",
    "apply_decomposition",
    "apply_pruning",
    "attach_adapters",
    "brute_force_search",
    "capture_activations",
    "decompose_matrix",
    "distill_loss",
    "evaluate_perplexity",
    "expert_importance",
    "expert_param_count",
    "finetune",
    "forward",
    "genetic_search",
    "lm_loss",
    "load_checkpoint",
    "make_calibration",
    "merge_adapters",
    "plan_pruning",
    "pretrain_teacher",
    "random_init",
    "run_pipeline",
    "save_checkpoint",
    "total_param_count",
]
