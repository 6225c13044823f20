"""Self-improvement loop for compositional generators with kernel preference losses."""

from .config import RunConfig, RunMode, continuous_defaults, discrete_defaults, load_config
from .core import Category, Fact, FactKind, PromptSpec, Question, Rng, Scene, TokenSequence
from .kernels import ALL_KERNELS, Aggregation, Distance, KernelSpec, kernel_distance, kernel_distance_grad
from .losses import (
    DpoConfig,
    cdpo_loss,
    dpo_loss_discrete,
    dpo_loss_gaussian,
    enumerate_dropout_oracle,
    kcdpo_loss,
    mc_predictive_estimate,
)
from .pipeline import EvalReport, PipelineError, ablation_sweep, evaluate, rank_pairs, run_iteration, run_pipeline
from .world import FeedbackMode, JudgeSpec, alignment_score, decompose_questions, ground_truth_score, judge_answer

__version__ = "0.1.0"
