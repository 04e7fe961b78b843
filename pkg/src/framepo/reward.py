"""Margin reward, group-relative advantages and reward variance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RewardRecord",
    "AdvantageGroup",
    "margin_reward",
    "margin_reward_ratio",
    "group_advantages",
    "reward_variance",
]


@dataclass(frozen=True)
class RewardRecord:
    logits: np.ndarray
    margin: float
    hardest_negative: int


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: np.ndarray
    advantages: np.ndarray
    eps: float


def _check_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.size < 2:
        raise ValueError(f"need at least two options, got {z.size}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z


def _hardest_negative(z: np.ndarray, correct: int) -> int:
    if not 0 <= correct < z.size:
        raise ValueError(f"correct index {correct} out of range for {z.size} options")
    others = z.copy()
    others[correct] = -np.inf
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(others))


def margin_reward(logits, correct: int) -> RewardRecord:
    """tanh of half the logit gap between the correct option and the hardest negative.

    Identical to (p* - p~) / (p* + p~) over the softmax confidences, but
    never forms the probabilities.
    """
    z = _check_logits(logits)
    neg = _hardest_negative(z, correct)
    margin = float(np.tanh(0.5 * (z[correct] - z[neg])))
    return RewardRecord(logits=z, margin=margin, hardest_negative=neg)


def margin_reward_ratio(logits, correct: int) -> float:
    """Reference form: normalized difference of softmax confidences."""
    z = _check_logits(logits)
    neg = _hardest_negative(z, correct)
    p = np.exp(z - z.max())
    p /= p.sum()
    return float((p[correct] - p[neg]) / (p[correct] + p[neg]))


def group_advantages(rewards, eps: float = 1e-6) -> AdvantageGroup:
    """(r - mean) / (population std + eps); exact zeros for a constant group."""
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if r.size < 2:
        raise ValueError(f"need at least two rewards per group, got {r.size}")
    if not eps > 0:
        raise ValueError("eps must be positive")
    centered = r - r.mean()
    if np.all(r == r[0]):
        adv = np.zeros_like(r)
    else:
        adv = centered / (r.std() + eps)
    return AdvantageGroup(rewards=r, advantages=adv, eps=eps)


def reward_variance(margins) -> float:
    m = np.asarray(margins, dtype=np.float64).reshape(-1)
    if m.size < 2:
        raise ValueError("reward variance needs at least two margins")
    return float(m.var())
