"""Synthetic needle-in-a-haystack episodes and a deterministic answer oracle.

An episode is a stand-in for a video/question pair: every frame is a short
sequence of feature tokens, a few "needle" frames carry a fixed signature
direction, and the oracle is confident in the correct option in proportion
to how many needles the shown subset covers.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "EnvConfig",
    "Episode",
    "OracleConfig",
    "gen_episode",
    "gen_dataset",
    "oracle_logits",
    "needle_direction",
    "episode_to_json",
    "episode_from_json",
    "write_jsonl",
    "read_jsonl",
    "iter_jsonl",
    "check_subset",
    "OracleScorer",
]

# fixed seed for the needle signature so every episode shares one direction
_SIGNATURE_SEED = 20240611


@dataclass(frozen=True)
class EnvConfig:
    T: int = 128
    L: int = 1
    d_in: int = 32
    d_q: int = 16
    M: int = 4
    n_needle: int = 3
    signal_strength: float = 4.0
    # "uniform": needle set drawn uniformly among all n_needle-subsets.
    # "clustered": needles fall inside one window of `cluster_span` frames.
    needle_layout: str = "uniform"
    cluster_span: int = 8
    # fraction of episodes whose oracle ignores the frames
    static_fraction: float = 0.0
    id_prefix: str = "ep"


@dataclass
class Episode:
    frames: np.ndarray  # (T, L, d_in)
    needle_set: frozenset
    query: np.ndarray  # (d_q,)
    options: list
    correct: int
    id: str
    # when set, the oracle uses this value instead of the needle coverage
    static_coverage: float | None = None

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def L(self) -> int:
        return self.frames.shape[1]

    @property
    def d_in(self) -> int:
        return self.frames.shape[2]

    @property
    def M(self) -> int:
        return len(self.options)

    def validate(self) -> "Episode":
        if self.frames.ndim != 3:
            raise ValueError(f"{self.id}: frames must be (T, L, d_in), got {self.frames.shape}")
        T, L, _ = self.frames.shape
        if L < 1:
            raise ValueError(f"{self.id}: L must be >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"{self.id}: non-finite frame tokens")
        if not 1 <= len(self.needle_set) <= T:
            raise ValueError(f"{self.id}: needle count {len(self.needle_set)} outside [1, {T}]")
        if any(not 0 <= n < T for n in self.needle_set):
            raise ValueError(f"{self.id}: needle index out of range")
        if len(self.options) < 2:
            raise ValueError(f"{self.id}: need at least two options")
        if not 0 <= self.correct < len(self.options):
            raise ValueError(f"{self.id}: correct index {self.correct} out of range")
        return self


@dataclass(frozen=True)
class OracleConfig:
    gain_a: float = 4.0
    bias_b: float = -2.0
    # frame index -> (option index, logit boost)
    decoy_map: Mapping[int, tuple] = field(default_factory=dict)
    noise_std: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if not self.gain_a > 0:
            raise ValueError("gain_a must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def needle_direction(d_in: int) -> np.ndarray:
    """Unit vector used as the needle signature for feature dimension d_in."""
    v = np.random.default_rng([_SIGNATURE_SEED, d_in]).standard_normal(d_in)
    return v / np.linalg.norm(v)


def _pick_needles(cfg: EnvConfig, rng: np.random.Generator) -> frozenset:
    if cfg.needle_layout == "uniform":
        idx = rng.choice(cfg.T, size=cfg.n_needle, replace=False)
    elif cfg.needle_layout == "clustered":
        span = min(max(cfg.cluster_span, cfg.n_needle), cfg.T)
        start = int(rng.integers(0, cfg.T - span + 1))
        idx = start + rng.choice(span, size=cfg.n_needle, replace=False)
    else:
        raise ValueError(f"unknown needle_layout {cfg.needle_layout!r}")
    return frozenset(int(i) for i in idx)


def gen_episode(cfg: EnvConfig, seed: int, needles: Iterable[int] | None = None) -> Episode:
    """Build one reproducible episode.

    ``needles`` pins the needle frames explicitly (used by the needle sweeps);
    otherwise they are drawn according to ``cfg.needle_layout``.
    """
    if cfg.T < 2:
        raise ValueError(f"T must be >= 2, got {cfg.T}")
    if not 1 <= cfg.n_needle <= cfg.T:
        raise ValueError(f"n_needle={cfg.n_needle} must lie in [1, T={cfg.T}]")
    if cfg.L < 1 or cfg.d_in < 1 or cfg.d_q < 1:
        raise ValueError("L, d_in and d_q must be >= 1")
    if cfg.M < 2:
        raise ValueError("M must be >= 2")

    rng = np.random.default_rng([int(seed), cfg.T, cfg.n_needle])
    if needles is None:
        needle_set = _pick_needles(cfg, rng)
    else:
        needle_set = frozenset(int(n) for n in needles)
    frames = rng.standard_normal((cfg.T, cfg.L, cfg.d_in))
    sig = cfg.signal_strength * needle_direction(cfg.d_in)
    for n in sorted(needle_set):
        frames[n] += sig
    query = rng.standard_normal(cfg.d_q)
    correct = int(rng.integers(cfg.M))
    static_coverage = None
    if cfg.static_fraction > 0 and rng.random() < cfg.static_fraction:
        static_coverage = float(rng.random())
    options = [chr(ord("A") + m) if m < 26 else f"opt{m}" for m in range(cfg.M)]
    ep = Episode(
        frames=frames,
        needle_set=needle_set,
        query=query,
        options=options,
        correct=correct,
        id=f"{cfg.id_prefix}-{seed}",
        static_coverage=static_coverage,
    )
    return ep.validate()


def gen_dataset(cfg: EnvConfig, n: int, seed: int = 0) -> list[Episode]:
    """``n`` episodes with seeds ``seed*1_000_003 + i``."""
    base = int(seed) * 1_000_003
    return [gen_episode(cfg, base + i) for i in range(n)]


def _noise_seed(episode_id: str, frame_set: Sequence[int], salt: int) -> int:
    h = hashlib.sha256()
    h.update(episode_id.encode())
    h.update(np.asarray(sorted(frame_set), dtype="<i8").tobytes())
    h.update(int(salt).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest()[:8], "little")


def check_subset(subset: Sequence[int], T: int) -> np.ndarray:
    idx = np.asarray(subset, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= T):
        raise ValueError(f"frame index out of range [0, {T})")
    if np.unique(idx).size != idx.size:
        raise ValueError("duplicate frame indices in subset")
    return idx


def oracle_logits(episode: Episode, subset: Sequence[int], oc: OracleConfig) -> np.ndarray:
    """Per-option logits for showing ``subset`` of the episode's frames.

    Depends only on the set of frames, never on their order.
    """
    idx = check_subset(subset, episode.T)
    frame_set = set(int(i) for i in idx)
    z = np.zeros(episode.M)
    if episode.static_coverage is not None:
        coverage = episode.static_coverage
    else:
        coverage = len(frame_set & episode.needle_set) / len(episode.needle_set)
    z[episode.correct] = oc.gain_a * coverage + oc.bias_b
    for f in sorted(frame_set):
        if f in oc.decoy_map:
            m, boost = oc.decoy_map[f]
            if m != episode.correct:
                z[m] += boost
    if oc.noise_std > 0:
        rng = np.random.default_rng(_noise_seed(episode.id, sorted(frame_set), oc.noise_seed))
        z = z + oc.noise_std * rng.standard_normal(episode.M)
    return z


# -- JSONL ---------------------------------------------------------------

def episode_to_json(ep: Episode) -> dict:
    T, L, d_in = ep.frames.shape
    rec = {
        "id": ep.id,
        "T": T,
        "L": L,
        "d_in": d_in,
        "frames": ep.frames.tolist(),
        "needles": sorted(int(n) for n in ep.needle_set),
        "query": ep.query.tolist(),
        "options": list(ep.options),
        "correct": int(ep.correct),
    }
    if ep.static_coverage is not None:
        rec["static_coverage"] = ep.static_coverage
    return rec


def episode_from_json(rec: dict) -> Episode:
    frames = np.asarray(rec["frames"], dtype=np.float64)
    frames = frames.reshape(rec["T"], rec["L"], rec["d_in"])
    return Episode(
        frames=frames,
        needle_set=frozenset(int(n) for n in rec["needles"]),
        query=np.asarray(rec["query"], dtype=np.float64),
        options=list(rec["options"]),
        correct=int(rec["correct"]),
        id=str(rec["id"]),
        static_coverage=rec.get("static_coverage"),
    ).validate()


def write_jsonl(path, episodes: Iterable[Episode]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_json(ep), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def iter_jsonl(path) -> Iterator[Episode]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield episode_from_json(json.loads(line))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad episode record: {exc}") from exc


def read_jsonl(path) -> list[Episode]:
    return list(iter_jsonl(path))


class OracleScorer:
    """In-process reward backend: ``scorer(episode, frame_ids) -> logits``."""

    def __init__(self, oc: OracleConfig | None = None):
        self.oc = oc if oc is not None else OracleConfig()

    def __call__(self, episode: Episode, frame_ids: Sequence[int]) -> np.ndarray:
        return oracle_logits(episode, frame_ids, self.oc)

    def score_many(self, episode: Episode, subsets: Sequence[Sequence[int]]) -> list:
        return [self(episode, s) for s in subsets]
