"""Reward-variance filtering of QA episodes.

Every episode is probed with 16 frame subsets: one drawn from each of 8
overlapping temporal windows and one from each window's complement. Episodes
whose margin barely moves across the probes carry no usable policy-gradient
signal and are dropped.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .policy import episode_stream_key
from .reward import margin_reward, reward_variance
from .synthenv import Episode

__all__ = [
    "WindowSpec",
    "FilterReport",
    "temporal_windows",
    "build_probe_subsets",
    "probe_margins",
    "score_and_filter",
    "calibrate_tau",
    "N_WINDOWS",
]

N_WINDOWS = 8


@dataclass(frozen=True)
class WindowSpec:
    T: int
    w: int
    stride: int
    windows: tuple      # 8 sorted index arrays
    complements: tuple  # 8 sorted index arrays
    k: int = 32


def temporal_windows(T: int, k: int = 32) -> WindowSpec:
    """W_i = [(i-1)s, (i-1)s + w) for i < 8 and W_8 = [0, s) U [7s, T), with w = ceil(T/8), s = ceil(w/2)."""
    if T < N_WINDOWS:
        raise ValueError(f"need T >= {N_WINDOWS}, got {T}")
    if k < 1:
        raise ValueError("k must be >= 1")
    w = math.ceil(T / N_WINDOWS)
    s = math.ceil(w / 2)
    frames = np.arange(T)
    windows = []
    for i in range(N_WINDOWS - 1):
        lo = i * s
        windows.append(np.arange(lo, min(lo + w, T)))
    windows.append(np.concatenate([np.arange(0, s), np.arange(min(7 * s, T), T)]))
    complements = tuple(np.setdiff1d(frames, win) for win in windows)
    return WindowSpec(T=T, w=w, stride=s, windows=tuple(windows), complements=complements, k=k)


def build_probe_subsets(episode: Episode, spec: WindowSpec, seed: int = 0) -> list:
    """Probes 1-8 from the windows, 9-16 from their complements; each sorted ascending."""
    if spec.T != episode.T:
        raise ValueError(f"window spec is for T={spec.T}, episode {episode.id} has T={episode.T}")
    key = episode_stream_key(episode.id)
    probes = []
    for i, region in enumerate(list(spec.windows) + list(spec.complements)):
        if region.size == 0:
            raise ValueError(f"{episode.id}: probe region {i + 1} is empty")
        if region.size <= spec.k:
            probes.append(region.copy())
            continue
        rng = np.random.default_rng([int(seed), key, i])
        probes.append(np.sort(rng.choice(region, size=spec.k, replace=False)))
    return probes


def probe_margins(episode: Episode, scorer: Callable, spec: WindowSpec | None = None, seed: int = 0) -> np.ndarray:
    spec = spec if spec is not None and spec.T == episode.T else temporal_windows(episode.T, spec.k if spec else 32)
    probes = build_probe_subsets(episode, spec, seed)
    lists = [p.tolist() for p in probes]
    logits = scorer.score_many(episode, lists) if hasattr(scorer, "score_many") else [scorer(episode, p) for p in lists]
    return np.array([margin_reward(z, episode.correct).margin for z in logits])


@dataclass
class FilterReport:
    tau: float
    k: int
    ids: list = field(default_factory=list)
    margins: list = field(default_factory=list)
    variances: list = field(default_factory=list)
    retained: list = field(default_factory=list)

    @property
    def retention_rate(self) -> float:
        return float(np.mean(self.retained)) if self.retained else 0.0

    def histogram(self, bins: int = 20):
        counts, edges = np.histogram(self.variances, bins=bins, range=(0.0, 1.0))
        return counts, edges

    def to_dict(self) -> dict:
        counts, edges = self.histogram()
        return {
            "tau": self.tau,
            "k": self.k,
            "n_episodes": len(self.ids),
            "n_retained": int(sum(self.retained)),
            "retention_rate": self.retention_rate,
            "variance_histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
            "episodes": [
                {"id": i, "margins": list(m), "variance": v, "retained": r}
                for i, m, v, r in zip(self.ids, self.margins, self.variances, self.retained)
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def score_and_filter(dataset: Sequence[Episode], scorer: Callable, tau: float = 0.21, k: int = 32,
                     seed: int = 0, workers: int = 1):
    """Keep episodes whose probe-margin variance exceeds ``tau``."""
    def one(ep: Episode):
        try:
            m = probe_margins(ep, scorer, temporal_windows(ep.T, k), seed)
        except Exception as exc:
            raise RuntimeError(f"scoring failed for episode {ep.id}: {exc}") from exc
        return m, reward_variance(m)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scored = list(pool.map(one, dataset))
    else:
        scored = [one(ep) for ep in dataset]

    report = FilterReport(tau=float(tau), k=k)
    kept = []
    for ep, (m, var) in zip(dataset, scored):
        keep = var > tau
        report.ids.append(ep.id)
        report.margins.append(m.tolist())
        report.variances.append(var)
        report.retained.append(bool(keep))
        if keep:
            kept.append(ep)
    return kept, report


def calibrate_tau(variances: Sequence[float], informative: Sequence[bool]) -> float:
    """Threshold maximizing balanced accuracy between informative and flat episodes.

    Candidate cuts sit halfway between consecutive distinct variances; ties
    go to the largest cut, i.e. the most conservative filter.
    """
    v = np.asarray(variances, dtype=np.float64)
    y = np.asarray(informative, dtype=bool)
    if v.size != y.size or v.size == 0:
        raise ValueError("variances and labels must be non-empty and aligned")
    if y.all() or not y.any():
        raise ValueError("calibration needs both informative and flat episodes")
    u = np.unique(v)
    cuts = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1]]])
    best, best_score = cuts[0], -1.0
    for c in cuts:
        pred = v > c
        score = 0.5 * (pred[y].mean() + (~pred[~y]).mean())
        if score >= best_score:
            best, best_score = c, score
    return float(best)
