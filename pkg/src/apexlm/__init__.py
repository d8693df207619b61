"""Stage-wise parameter expansion for a toy GLU transformer, on numpy."""

from .analysis import construct_rank_testcase, effective_rank, rank_report, svd_small
from .assessment import ActivationLedger, AdvantageSets, mask_components, select_sets, update_scores
from .expansion import OperatorBundle, attach_operators, fuse_all, fuse_operator
from .model import ModelConfig, ModelParams, forward_logits, init_params, perplexity
from .staging import StagePlan, run_stage, run_training

__version__ = "0.1.0"
