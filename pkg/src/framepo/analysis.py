"""Behavioral analysis of a frame-selection policy.

Selection PDFs, pairwise divergences between them, k-NN entropy of selected
frame times, needle-in-a-haystack sweeps and likelihood-bin evaluation.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .policy import PolicyParams, episode_stream_key, sample_subsets
from .reward import margin_reward
from .synthenv import EnvConfig, Episode, gen_episode

__all__ = [
    "SelectionPdf",
    "NiahGrid",
    "BinRow",
    "BinTable",
    "estimate_selection_pdf",
    "distribution_distances",
    "pairwise_diversity",
    "kl_entropy",
    "selection_time_entropy",
    "needle_episode_factory",
    "vniah_sweep",
    "uniform_niah_grid",
    "likelihood_bins_eval",
    "uniform_baseline_reward",
    "KL_SMOOTHING",
]

log = logging.getLogger(__name__)

KL_SMOOTHING = 1e-6


@dataclass
class SelectionPdf:
    p: np.ndarray
    n_runs: int
    episode_id: str


def estimate_selection_pdf(params: PolicyParams, episode: Episode, n_select: int,
                           n_runs: int = 64, seed: int = 0) -> SelectionPdf:
    """Average the per-step categorical distributions over steps, then over runs."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    _, probs = sample_subsets(params, episode, n_select, n_runs, seed=seed, return_probs=True)
    p = probs.mean(axis=1).mean(axis=0)
    return SelectionPdf(p=p, n_runs=n_runs, episode_id=episode.id)


def _as_pdf(p) -> np.ndarray:
    a = np.asarray(getattr(p, "p", p), dtype=np.float64).reshape(-1)
    if np.any(a < 0) or not np.isfinite(a).all():
        raise ValueError("distribution has negative or non-finite entries")
    total = a.sum()
    if total <= 0:
        raise ValueError("distribution has zero mass")
    return a / total


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def distribution_distances(p, q, smoothing: float = KL_SMOOTHING) -> dict:
    """JS divergence (nats), symmetric KL and W1 between two distributions over frames.

    JS and W1 use the raw distributions. The KL terms mix each side with the
    uniform distribution at weight ``smoothing`` so empty frames stay finite.
    """
    p, q = _as_pdf(p), _as_pdf(q)
    if p.size != q.size:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    m = 0.5 * (p + q)
    js = 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    u = np.full(p.size, 1.0 / p.size)
    ps = (1.0 - smoothing) * p + smoothing * u
    qs = (1.0 - smoothing) * q + smoothing * u
    sym_kl = _kl(ps, qs) + _kl(qs, ps)
    w1 = float(np.abs(np.cumsum(p) - np.cumsum(q)).sum())
    return {"js": js, "sym_kl": sym_kl, "w1": w1}


def pairwise_diversity(pdfs: Sequence, smoothing: float = KL_SMOOTHING) -> dict:
    if len(pdfs) < 2:
        raise ValueError("need at least two distributions")
    sums = {"js": 0.0, "sym_kl": 0.0, "w1": 0.0}
    n_pairs = 0
    for a, b in combinations(pdfs, 2):
        d = distribution_distances(a, b, smoothing)
        for key in sums:
            sums[key] += d[key]
        n_pairs += 1
    out = {key: val / n_pairs for key, val in sums.items()}
    out["n_pairs"] = n_pairs
    return out


def kl_entropy(samples, k: int = 3, jitter: float = 1e-9, seed: int = 0) -> float:
    """Kozachenko-Leonenko differential entropy (nats) of 1-D samples.

    H = psi(n) - psi(k) + ln 2 + mean(ln eps_i), eps_i the distance from
    sample i to its k-th nearest neighbour. Exact ties get an additive
    jitter of scale ``jitter`` so no distance is zero.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    n = x.size
    if k < 1 or n <= k:
        raise ValueError(f"need n > k >= 1, got n={n}, k={k}")
    if np.unique(x).size < n:
        log.debug("kl_entropy: %d tied samples, adding jitter %.1e", n - np.unique(x).size, jitter)
        x = x + jitter * np.random.default_rng(seed).random(n)
    tree = cKDTree(x[:, None])
    dist, _ = tree.query(x[:, None], k=k + 1)
    eps = dist[:, k]
    return float(digamma(n) - digamma(k) + math.log(2.0) + np.mean(np.log(eps)))


def selection_time_entropy(params: PolicyParams, episodes: Sequence[Episode], n_select: int,
                           n_runs: int = 16, k: int = 1, seed: int = 0) -> float:
    """Mean k-NN entropy of the normalized times t/T of each sampled subset."""
    vals = []
    for ep in episodes:
        for c in sample_subsets(params, ep, n_select, n_runs, seed=seed):
            vals.append(kl_entropy(c.time_sorted / ep.T, k=min(k, n_select - 1)))
    return float(np.mean(vals))


# -- needle sweep ----------------------------------------------------------

@dataclass
class NiahGrid:
    frame_counts: list
    positions: list
    cells: np.ndarray  # (len(positions), len(frame_counts)) needle mass

    def ratio_to(self, other: "NiahGrid") -> np.ndarray:
        return self.cells / other.cells

    def to_csv(self, path, value_name: str = "needle_mass") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "position", value_name])
            for i, pos in enumerate(self.positions):
                for j, T in enumerate(self.frame_counts):
                    w.writerow([T, repr(float(pos)), repr(float(self.cells[i, j]))])


def needle_index(T: int, position: float) -> int:
    if not 0.0 <= position <= 1.0:
        raise ValueError("relative needle position must lie in [0, 1]")
    return int(round(position * (T - 1)))


def needle_episode_factory(cfg: EnvConfig | None = None, seed: int = 0) -> Callable:
    """``factory(T, position)`` -> single-needle episode with the needle at round(position*(T-1))."""
    base = cfg if cfg is not None else EnvConfig()

    def factory(T: int, position: float) -> Episode:
        c = replace(base, T=T, n_needle=1, id_prefix=f"niah-T{T}-p{position:.3f}")
        return gen_episode(c, seed, needles=[needle_index(T, position)])

    return factory


def vniah_sweep(params: PolicyParams, env_factory: Callable, frame_counts: Sequence[int],
                needle_positions: Sequence[float], n_select: int, n_runs: int = 64,
                seed: int = 0) -> NiahGrid:
    cells = np.zeros((len(needle_positions), len(frame_counts)))
    for i, pos in enumerate(needle_positions):
        for j, T in enumerate(frame_counts):
            ep = env_factory(T, pos)
            if len(ep.needle_set) != 1:
                raise ValueError("needle sweep expects single-needle episodes")
            pdf = estimate_selection_pdf(params, ep, min(n_select, T), n_runs, seed)
            cells[i, j] = pdf.p[next(iter(ep.needle_set))]
    return NiahGrid(list(frame_counts), list(needle_positions), cells)


def uniform_niah_grid(frame_counts: Sequence[int], needle_positions: Sequence[float]) -> NiahGrid:
    cells = np.tile(1.0 / np.asarray(frame_counts, dtype=np.float64), (len(needle_positions), 1))
    return NiahGrid(list(frame_counts), list(needle_positions), cells)


# -- likelihood bins -------------------------------------------------------

@dataclass
class BinRow:
    k: int
    side: str
    accuracy: float
    n_frames: int
    exhausted: bool


@dataclass
class BinTable:
    baseline: float
    rows: list = field(default_factory=list)

    def accuracy(self, k: int, side: str) -> float:
        for r in self.rows:
            if r.k == k and r.side == side:
                return r.accuracy
        raise KeyError((k, side))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "side", "accuracy", "ratio_to_baseline", "n_frames", "exhausted"])
            for r in self.rows:
                ratio = r.accuracy / self.baseline if self.baseline > 0 else float("nan")
                w.writerow([r.k, r.side, repr(r.accuracy), repr(ratio), r.n_frames, int(r.exhausted)])
            w.writerow([100, "all", repr(self.baseline), repr(1.0 if self.baseline > 0 else float("nan")), "", 0])


def _answered(logits: np.ndarray, correct: int) -> bool:
    # strict win over every distractor; a tie is not an answer
    return margin_reward(logits, correct).margin > 0


def _bin_accuracy(episodes, pools, scorer, n_select, n_subsets, seed, tag) -> tuple:
    hits = 0
    total = 0
    exhausted = False
    for ep, pool in zip(episodes, pools):
        rng = np.random.default_rng([int(seed), episode_stream_key(ep.id), tag])
        take = min(n_select, pool.size)
        exhausted |= pool.size < n_select
        for _ in range(n_subsets):
            subset = np.sort(rng.choice(pool, size=take, replace=False))
            hits += _answered(np.asarray(scorer(ep, subset.tolist())), ep.correct)
            total += 1
    return hits / total, exhausted


def likelihood_bins_eval(params: PolicyParams, episodes: Sequence[Episode], scorer: Callable,
                         ks: Sequence[int] = (20, 40, 60, 80), n_select: int = 8, n_runs: int = 64,
                         n_subsets: int = 32, seed: int = 0) -> BinTable:
    """Accuracy when subsets are drawn only from the most (over-k%) or least (under-k%) likely frames.

    Frames are ranked by the estimated selection PDF; a k% bin holds
    ceil(k/100 * T) frames. Bins smaller than ``n_select`` are used whole and flagged.
    """
    orders = []
    for ep in episodes:
        p = estimate_selection_pdf(params, ep, min(n_select, ep.T), n_runs, seed).p
        # descending likelihood; stable so ties keep temporal order
        orders.append(np.argsort(-p, kind="stable"))
    all_pools = [np.arange(ep.T) for ep in episodes]
    baseline, _ = _bin_accuracy(episodes, all_pools, scorer, n_select, n_subsets, seed, 0)
    table = BinTable(baseline=baseline)
    for k in ks:
        if not 0 < k <= 100:
            raise ValueError("bin percentages must lie in (0, 100]")
        for side, tag in (("over", 1000 + k), ("under", 2000 + k)):
            pools = []
            for ep, order in zip(episodes, orders):
                size = max(1, math.ceil(k / 100 * ep.T))
                pools.append(np.sort(order[:size] if side == "over" else order[ep.T - size:]))
            # a bin holding every frame is the unrestricted pool; share its draws
            if all(p.size == ep.T for p, ep in zip(pools, episodes)):
                tag = 0
            acc, exhausted = _bin_accuracy(episodes, pools, scorer, n_select, n_subsets, seed, tag)
            table.rows.append(BinRow(k, side, acc, int(pools[0].size), exhausted))
    return table


def uniform_baseline_reward(episodes: Sequence[Episode], scorer: Callable, n_select: int,
                            n_samples: int = 64, seed: int = 0) -> float:
    """Mean margin of uniformly drawn subsets (no policy)."""
    total = 0.0
    count = 0
    for ep in episodes:
        rng = np.random.default_rng([int(seed), episode_stream_key(ep.id), 77])
        for _ in range(n_samples):
            subset = np.sort(rng.choice(ep.T, size=n_select, replace=False))
            total += margin_reward(scorer(ep, subset.tolist()), ep.correct).margin
            count += 1
    return total / count
