"""Group-relative policy optimization over frame subsets.

Each outer step snapshots the policy, samples N candidate subsets per
episode from the snapshot, scores them with the reward backend, normalizes
margins within each episode's group, and takes K AdamW steps on the
importance-weighted objective with an entropy bonus.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .optim import AdamWConfig, OptimizerState, optimizer_step
from .policy import BatchItem, PolicyDims, PolicyParams, init_params, objective_and_gradient, sample_subsets
from .reward import group_advantages, margin_reward
from .synthenv import Episode, OracleScorer

__all__ = ["TrainConfig", "TrainResult", "TrainingError", "JsonlSink", "train", "score_candidates"]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    N: int = 16
    n_select: int = 8
    K: int = 1
    beta: float = 0.002
    lr_backbone: float = 1e-5
    lr_heads: float = 1e-4
    warmup_ratio: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    batch_size: int = 192
    total_steps: int = 2000
    seed: int = 0
    eps_adv: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    entropy_mode: str = "mean"
    # K > 1: "reuse" the sampled candidates or "resample" fresh ones from the snapshot
    inner_mode: str = "reuse"
    checkpoint_every: int = 0
    checkpoint_dtype: str = "f64"
    workers: int = 1
    d_e: int = 32
    d_model: int = 32
    d_g: int = 32

    def validate(self) -> "TrainConfig":
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.n_select < 1:
            raise ValueError("n_select must be >= 1")
        if min(self.lr_backbone, self.lr_heads) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")
        if self.inner_mode not in ("reuse", "resample"):
            raise ValueError(f"inner_mode must be 'reuse' or 'resample', got {self.inner_mode!r}")
        if self.entropy_mode not in ("mean", "sum"):
            raise ValueError(f"entropy_mode must be 'mean' or 'sum', got {self.entropy_mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self

    def optimizer_config(self) -> AdamWConfig:
        return AdamWConfig(
            lr_heads=self.lr_heads,
            lr_backbone=self.lr_backbone,
            betas=(self.adam_beta1, self.adam_beta2),
            eps=self.adam_eps,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
            warmup_ratio=self.warmup_ratio,
            total_updates=max(self.total_steps * self.K, 1),
        )


@dataclass
class TrainResult:
    params: PolicyParams
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


class JsonlSink:
    """Appends one JSON record per line."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _step_seed(seed: int, step: int, inner: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed), int(step), int(inner), 0xA11])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def score_candidates(scorer: Callable, episode: Episode, subsets: Sequence[np.ndarray]) -> np.ndarray:
    """Margins for time-sorted subsets, batched when the backend supports it."""
    frame_lists = [np.sort(s).tolist() for s in subsets]
    if hasattr(scorer, "score_many"):
        logits = scorer.score_many(episode, frame_lists)
    else:
        logits = [scorer(episode, f) for f in frame_lists]
    return np.array([margin_reward(z, episode.correct).margin for z in logits])


def _collect(snapshot: PolicyParams, ep: Episode, cfg: TrainConfig, scorer, seed: int):
    cands = sample_subsets(snapshot, ep, cfg.n_select, cfg.N, seed=seed)
    subsets = np.stack([c.indices for c in cands])
    margins = score_candidates(scorer, ep, [c.time_sorted for c in cands])
    adv = group_advantages(margins, cfg.eps_adv).advantages
    old = np.array([c.logp for c in cands])
    ent = float(np.mean([c.step_entropies.mean() for c in cands]))
    recall = float(np.mean([
        len(set(c.time_sorted.tolist()) & ep.needle_set) / len(ep.needle_set) for c in cands
    ]))
    return BatchItem(ep, subsets, adv, old), margins, ent, recall


def _objective(params, batch, cfg: TrainConfig, mapper):
    # per-episode shards and an ordered reduction, so the sum is identical for any worker count
    n_total = sum(item.subsets.shape[0] for item in batch)
    parts = list(mapper(
        lambda item: objective_and_gradient(params, [item], cfg.beta, cfg.entropy_mode), batch))
    J = 0.0
    grads = params.zeros_like()
    for item, (j_part, g_part) in zip(batch, parts):
        w = item.subsets.shape[0] / n_total
        J += w * j_part
        grads.add_(g_part, w)
    return J, grads


def train(cfg: TrainConfig, dataset: Sequence[Episode], sink: Callable | None = None,
          scorer: Callable | None = None, params: PolicyParams | None = None,
          checkpoint_dir=None) -> TrainResult:
    cfg.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    scorer = scorer if scorer is not None else OracleScorer()
    if params is None:
        ep0 = dataset[0]
        dims = PolicyDims(d_in=ep0.d_in, d_q=ep0.query.size, d_e=cfg.d_e, d_model=cfg.d_model, d_g=cfg.d_g)
        params = init_params(dims, cfg.seed)
    else:
        params = params.copy()
    opt_cfg = cfg.optimizer_config()
    state = OptimizerState.zeros(params)
    result = TrainResult(params=params)
    emit = sink if sink is not None else (lambda rec: None)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    mapper = pool.map if pool is not None else map

    try:
        for step in range(cfg.total_steps):
            rng = np.random.default_rng([int(cfg.seed), step, 0xBA7C])
            replace = cfg.batch_size > len(dataset)
            chosen = rng.choice(len(dataset), size=cfg.batch_size, replace=replace)
            episodes = [dataset[i] for i in chosen]
            snapshot = params.copy()
            seed = _step_seed(cfg.seed, step)
            collected = list(mapper(lambda ep: _collect(snapshot, ep, cfg, scorer, seed), episodes))
            batch = [c[0] for c in collected]
            margins = np.concatenate([c[1] for c in collected])
            record = {
                "step": step,
                "mean_reward": float(margins.mean()),
                "mean_entropy": float(np.mean([c[2] for c in collected])),
                "needle_recall": float(np.mean([c[3] for c in collected])),
                "zero_var_groups": int(sum(not np.any(b.advantages) for b in batch)),
            }
            for inner in range(cfg.K):
                if inner > 0 and cfg.inner_mode == "resample":
                    seed_i = _step_seed(cfg.seed, step, inner)
                    batch = [b[0] for b in mapper(lambda ep: _collect(snapshot, ep, cfg, scorer, seed_i), episodes)]
                J, grads = _objective(params, batch, cfg, mapper)
                if not (math.isfinite(J) and grads.all_finite()):
                    diag = {"step": step, "inner": inner, "error": "non-finite objective or gradient",
                            "objective": J if math.isfinite(J) else str(J)}
                    emit(diag)
                    raise TrainingError(json.dumps(diag))
                _, mult, norm = optimizer_step(state, params, grads.map(np.negative), opt_cfg)
                if inner == 0:
                    record["objective"] = J
                    record["grad_norm"] = norm
                    record["lr"] = mult * cfg.lr_heads
            emit(record)
            result.history.append(record)
            if cfg.checkpoint_every and checkpoint_dir is not None and (step + 1) % cfg.checkpoint_every == 0:
                stem = Path(checkpoint_dir) / f"step{step + 1:06d}"
                save_checkpoint(params, stem, dtype=cfg.checkpoint_dtype, meta={"step": step + 1})
                result.checkpoints.append(str(stem))
            if step % 100 == 0:
                log.info("step %d reward %.4f recall %.3f", step, record["mean_reward"], record["needle_recall"])
    finally:
        if pool is not None:
            pool.shutdown()
    return result


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
