"""scikit-learn compatible wrappers.

``FrameSelector`` trains the selection policy with ``fit`` and returns
time-sorted frame subsets from ``predict``; ``RewardVarianceFilter`` is a
transformer that drops episodes with flat probe rewards.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .analysis import estimate_selection_pdf
from .filterpipe import calibrate_tau, score_and_filter
from .policy import PolicyParams, sample_subsets
from .reward import margin_reward
from .synthenv import Episode, OracleConfig, OracleScorer
from .trainer import TrainConfig, train

__all__ = ["FrameSelector", "RewardVarianceFilter", "check_episodes", "check_is_fitted_policy"]


def check_episodes(X, min_T: int = 1) -> list:
    """Validate a collection of episodes and return it as a list."""
    if isinstance(X, Episode):
        X = [X]
    episodes = list(X)
    if not episodes:
        raise ValueError("expected at least one episode")
    for ep in episodes:
        if not isinstance(ep, Episode):
            raise TypeError(f"expected Episode, got {type(ep).__name__}")
        ep.validate()
        if ep.T < min_T:
            raise ValueError(f"episode {ep.id} has T={ep.T} < {min_T}")
    return episodes


def check_is_fitted_policy(est) -> PolicyParams:
    params = getattr(est, "params_", None)
    if params is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")
    return params


class FrameSelector(BaseEstimator):
    """Learns which frames to show for each episode.

    Parameters mirror :class:`~framepo.trainer.TrainConfig`; ``oracle`` is the
    reward backend's :class:`OracleConfig` (ignored when ``scorer`` is given).
    """

    def __init__(self, n_select=8, n_candidates=16, n_inner=1, beta=0.002, lr_heads=1e-4,
                 lr_backbone=1e-5, warmup_ratio=0.05, weight_decay=0.01, grad_clip=1.0,
                 batch_size=16, total_steps=2000, entropy_mode="mean", oracle=None, scorer=None,
                 n_runs=64, workers=1, random_state=0):
        self.n_select = n_select
        self.n_candidates = n_candidates
        self.n_inner = n_inner
        self.beta = beta
        self.lr_heads = lr_heads
        self.lr_backbone = lr_backbone
        self.warmup_ratio = warmup_ratio
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.entropy_mode = entropy_mode
        self.oracle = oracle
        self.scorer = scorer
        self.n_runs = n_runs
        self.workers = workers
        self.random_state = random_state

    def _scorer(self):
        if self.scorer is not None:
            return self.scorer
        return OracleScorer(self.oracle if self.oracle is not None else OracleConfig())

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            N=self.n_candidates, n_select=self.n_select, K=self.n_inner, beta=self.beta,
            lr_heads=self.lr_heads, lr_backbone=self.lr_backbone, warmup_ratio=self.warmup_ratio,
            weight_decay=self.weight_decay, grad_clip=self.grad_clip, batch_size=self.batch_size,
            total_steps=self.total_steps, entropy_mode=self.entropy_mode, workers=self.workers,
            seed=int(self.random_state),
        ).validate()

    def fit(self, X, y=None, sink=None):
        episodes = check_episodes(X, min_T=self.n_select)
        result = train(self._train_config(), episodes, sink=sink, scorer=self._scorer())
        self.params_ = result.params
        self.history_ = result.history
        self.n_frames_in_ = episodes[0].d_in
        return self

    def predict(self, X) -> list:
        """One sampled subset per episode, sorted by time."""
        params = check_is_fitted_policy(self)
        episodes = check_episodes(X, min_T=self.n_select)
        return [
            sample_subsets(params, ep, self.n_select, 1, seed=int(self.random_state))[0].time_sorted
            for ep in episodes
        ]

    def predict_proba(self, X) -> list:
        """Selection PDF over frames for each episode."""
        params = check_is_fitted_policy(self)
        episodes = check_episodes(X, min_T=self.n_select)
        return [
            estimate_selection_pdf(params, ep, self.n_select, self.n_runs, int(self.random_state)).p
            for ep in episodes
        ]

    def score(self, X, y=None) -> float:
        """Mean margin reward of the predicted subsets."""
        episodes = check_episodes(X, min_T=self.n_select)
        scorer = self._scorer()
        subsets = self.predict(episodes)
        return float(np.mean([
            margin_reward(scorer(ep, s.tolist()), ep.correct).margin for ep, s in zip(episodes, subsets)
        ]))


class RewardVarianceFilter(TransformerMixin, BaseEstimator):
    """Keeps episodes whose 16-probe margin variance exceeds ``tau``.

    ``fit`` scores the episodes; with ``y`` (True = informative episode) and
    ``tau="calibrate"`` the threshold is fitted to separate the two groups.
    """

    def __init__(self, tau=0.21, k=32, oracle=None, scorer=None, random_state=0, workers=1):
        self.tau = tau
        self.k = k
        self.oracle = oracle
        self.scorer = scorer
        self.random_state = random_state
        self.workers = workers

    def _scorer(self):
        if self.scorer is not None:
            return self.scorer
        return OracleScorer(self.oracle if self.oracle is not None else OracleConfig())

    def _score(self, episodes: Sequence[Episode], tau: float):
        return score_and_filter(episodes, self._scorer(), tau=tau, k=self.k,
                                seed=int(self.random_state), workers=self.workers)

    def fit(self, X, y=None):
        episodes = check_episodes(X, min_T=8)
        if self.tau == "calibrate":
            if y is None:
                raise ValueError("tau='calibrate' needs labels y")
            _, report = self._score(episodes, 0.0)
            self.tau_ = calibrate_tau(report.variances, np.asarray(y, dtype=bool))
        else:
            self.tau_ = float(self.tau)
        _, self.report_ = self._score(episodes, self.tau_)
        self.variances_ = np.asarray(self.report_.variances)
        return self

    def transform(self, X) -> list:
        if not hasattr(self, "tau_"):
            raise NotFittedError("RewardVarianceFilter is not fitted yet; call fit first")
        kept, _ = self._score(check_episodes(X, min_T=8), self.tau_)
        return kept
