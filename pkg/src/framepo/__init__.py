"""Learned frame selection for long-video question answering, trained with group-relative policy optimisation."""
from .estimator import FrameSelector, RewardVarianceFilter
from .filterpipe import score_and_filter, temporal_windows
from .policy import PolicyDims, PolicyParams, init_params, sample_subsets
from .reward import group_advantages, margin_reward
from .synthenv import EnvConfig, Episode, OracleConfig, OracleScorer, gen_dataset, gen_episode
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "EnvConfig",
    "Episode",
    "OracleConfig",
    "OracleScorer",
    "gen_episode",
    "gen_dataset",
    "margin_reward",
    "group_advantages",
    "PolicyDims",
    "PolicyParams",
    "init_params",
    "sample_subsets",
    "TrainConfig",
    "train",
    "temporal_windows",
    "score_and_filter",
    "FrameSelector",
    "RewardVarianceFilter",
    "__version__",
]
