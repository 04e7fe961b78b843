"""Autoregressive frame-subset policy.

Frames are embedded by a small causal tanh recurrence over their tokens (the
last hidden state represents the frame). Keys and values are linear heads on
that embedding. A recurrent selection state, seeded from the question, emits
a query at every step; the next frame is drawn from a masked softmax over
scaled dot products between that query and all frame keys. The value of the
chosen frame is then folded back into the selection state.

Everything is float64 numpy, and gradients are written out by hand so they
can be checked against finite differences.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from typing import Iterator, Sequence

import numpy as np

from .synthenv import Episode, check_subset

__all__ = [
    "PolicyDims",
    "PolicyParams",
    "FrameEmbeddings",
    "CandidateSubset",
    "BatchItem",
    "init_params",
    "frame_embeddings",
    "step_distribution",
    "sample_subsets",
    "subset_logprob",
    "objective_and_gradient",
    "episode_stream_key",
    "BACKBONE_FIELDS",
]

# parameters standing in for the pretrained backbone (token aggregator)
BACKBONE_FIELDS = ("A", "B")


@dataclass(frozen=True)
class PolicyDims:
    d_in: int = 32
    d_q: int = 16
    d_e: int = 32
    d_model: int = 32
    d_g: int = 32

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")


@dataclass
class PolicyParams:
    A: np.ndarray    # (d_e, d_in) token -> aggregator input
    B: np.ndarray    # (d_e, d_e) aggregator recurrence
    W_k: np.ndarray  # (d_model, d_e) key head
    W_q: np.ndarray  # (d_model, d_g) query head
    W_v: np.ndarray  # (d_model, d_e) value head
    b_v: np.ndarray  # (d_model,) value bias
    W_g: np.ndarray  # (d_g, d_g) selection-state recurrence
    W_u: np.ndarray  # (d_g, d_model) value -> state
    W_c: np.ndarray  # (d_g, d_q) question conditioning
    u0: np.ndarray   # (d_g,) start-of-selection embedding
    s: np.ndarray    # () logit scale

    @classmethod
    def names(cls) -> tuple:
        return tuple(f.name for f in fields(cls))

    def items(self) -> Iterator[tuple]:
        for name in self.names():
            yield name, getattr(self, name)

    @property
    def dims(self) -> PolicyDims:
        return PolicyDims(
            d_in=self.A.shape[1], d_q=self.W_c.shape[1], d_e=self.A.shape[0],
            d_model=self.W_k.shape[0], d_g=self.W_g.shape[0],
        )

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(**{k: np.zeros_like(v) for k, v in self.items()})

    def map(self, fn) -> "PolicyParams":
        return PolicyParams(**{k: np.array(fn(v), dtype=np.float64) for k, v in self.items()})

    def add_(self, other: "PolicyParams", scale: float = 1.0) -> "PolicyParams":
        for k, v in self.items():
            v += scale * getattr(other, k)
        return self

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for _, v in self.items())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())


@dataclass
class FrameEmbeddings:
    E: np.ndarray        # (T, d_e)
    K: np.ndarray        # (T, d_model)
    V: np.ndarray        # (T, d_model)
    hidden: list         # aggregator states h_1..h_L, each (T, d_e)


@dataclass
class CandidateSubset:
    indices: np.ndarray         # selection order
    time_sorted: np.ndarray
    step_logps: np.ndarray
    step_entropies: np.ndarray

    @property
    def logp(self) -> float:
        return float(self.step_logps.sum())


@dataclass
class BatchItem:
    """One episode's candidates for the policy objective."""
    episode: Episode
    subsets: np.ndarray      # (N, T') selection order
    advantages: np.ndarray   # (N,)
    old_logps: np.ndarray    # (N,) log-probs under the sampling snapshot


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


def init_params(dims: PolicyDims, seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng([int(seed), 0x5EED])
    d = dims
    return PolicyParams(
        A=_orthogonal(rng, d.d_e, d.d_in, 1.0),
        B=_orthogonal(rng, d.d_e, d.d_e, 0.5),
        W_k=_orthogonal(rng, d.d_model, d.d_e, 1.0),
        W_q=_orthogonal(rng, d.d_model, d.d_g, 1.0),
        W_v=_orthogonal(rng, d.d_model, d.d_e, 0.1),
        b_v=np.zeros(d.d_model),
        W_g=_orthogonal(rng, d.d_g, d.d_g, 1.0),
        W_u=_orthogonal(rng, d.d_g, d.d_model, 1.0),
        W_c=_orthogonal(rng, d.d_g, d.d_q, 1.0),
        u0=0.02 * rng.standard_normal(d.d_g),
        s=np.array(1.0),
    )


def frame_embeddings(params: PolicyParams, episode: Episode) -> FrameEmbeddings:
    X = episode.frames
    h = np.zeros((X.shape[0], params.A.shape[0]))
    hidden = []
    for l in range(X.shape[1]):
        h = np.tanh(X[:, l] @ params.A.T + h @ params.B.T)
        hidden.append(h)
    K = h @ params.W_k.T
    V = h @ params.W_v.T + params.b_v
    return FrameEmbeddings(E=h, K=K, V=V, hidden=hidden)


def _masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with masked entries at -inf. ``mask`` True = excluded."""
    ell = np.where(mask, -np.inf, logits)
    top = ell.max(axis=-1, keepdims=True)
    shifted = ell - top
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def step_distribution(params: PolicyParams, K: np.ndarray, g: np.ndarray, mask) -> np.ndarray:
    """Next-frame distribution for selection state ``g`` with ``mask`` frames excluded."""
    T = K.shape[0]
    excluded = np.zeros(T, dtype=bool)
    idx = np.asarray(sorted(set(int(i) for i in mask)), dtype=np.int64)
    if idx.size:
        excluded[idx] = True
    if excluded.all():
        raise ValueError("every frame is masked")
    d_model = K.shape[1]
    logits = (K @ (params.W_q @ g)) * float(params.s) / np.sqrt(d_model)
    logp = _masked_log_softmax(logits[None, :], excluded[None, :])[0]
    return np.where(excluded, 0.0, np.exp(logp))


def episode_stream_key(episode_id: str) -> int:
    return int.from_bytes(hashlib.sha256(episode_id.encode()).digest()[:8], "little")


def _candidate_uniforms(seed: int, episode_id: str, n_candidates: int, n_select: int) -> np.ndarray:
    key = episode_stream_key(episode_id)
    out = np.empty((n_candidates, n_select))
    for j in range(n_candidates):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), key, j]))
        out[j] = rng.random(n_select)
    return out


class _Rollout:
    """Forward pass over N candidates of one episode; keeps what backward needs."""

    def __init__(self, params: PolicyParams, episode: Episode, n_select: int,
                 actions: np.ndarray | None = None, uniforms: np.ndarray | None = None,
                 emb: FrameEmbeddings | None = None):
        self.params = params
        self.episode = episode
        self.emb = emb if emb is not None else frame_embeddings(params, episode)
        K, V = self.emb.K, self.emb.V
        T, d_model = K.shape
        if n_select > T:
            raise ValueError(f"cannot select {n_select} frames from {T}")
        N = actions.shape[0] if actions is not None else uniforms.shape[0]
        self.scale = 1.0 / np.sqrt(d_model)
        s = float(params.s)

        self.g0 = np.tanh(params.W_c @ episode.query + params.u0)
        g = np.broadcast_to(self.g0, (N, self.g0.size)).copy()
        mask = np.zeros((N, T), dtype=bool)
        rows = np.arange(N)

        self.G, self.QV, self.S, self.P, self.logP = [], [], [], [], []
        self.masks = []
        acts = np.empty((N, n_select), dtype=np.int64)
        step_logp = np.empty((N, n_select))
        step_H = np.empty((N, n_select))
        for i in range(n_select):
            qv = g @ params.W_q.T
            S = (qv @ K.T) * self.scale
            logP = _masked_log_softmax(s * S, mask)
            P = np.exp(logP)
            logP = np.where(mask, 0.0, logP)
            if actions is not None:
                f = actions[:, i]
            else:
                cdf = np.cumsum(P, axis=1)
                u = uniforms[:, i] * cdf[:, -1]
                f = (cdf > u[:, None]).argmax(axis=1)
                # guard against round-off pushing the draw onto a masked frame
                bad = mask[rows, f]
                if bad.any():
                    for r in np.nonzero(bad)[0]:
                        f[r] = np.nonzero(~mask[r])[0][-1]
            if mask[rows, f].any():
                raise ValueError("subset selects a frame twice")
            acts[:, i] = f
            step_logp[:, i] = logP[rows, f]
            step_H[:, i] = -(P * logP).sum(axis=1)
            self.G.append(g)
            self.QV.append(qv)
            self.S.append(S)
            self.P.append(P)
            self.logP.append(logP)
            self.masks.append(mask.copy())
            mask[rows, f] = True
            if i + 1 < n_select:
                g = np.tanh(g @ params.W_g.T + V[f] @ params.W_u.T)
        self.actions = acts
        self.step_logp = step_logp
        self.step_H = step_H

    def backward(self, w_logp: np.ndarray, w_H: np.ndarray, grads: PolicyParams) -> None:
        """Accumulate d/dθ of Σ_j w_logp[j]·logp_j + Σ_{j,i} w_H[j,i]·H_{j,i} into ``grads``."""
        p = self.params
        K, V, E = self.emb.K, self.emb.V, self.emb.E
        s = float(p.s)
        n_select = self.actions.shape[1]
        N = self.actions.shape[0]
        rows = np.arange(N)
        w_H = np.broadcast_to(np.asarray(w_H, dtype=np.float64), (N, n_select))

        dK = np.zeros_like(K)
        dV = np.zeros_like(V)
        dg_next = np.zeros((N, p.W_g.shape[0]))
        ds = 0.0
        for i in range(n_select - 1, -1, -1):
            g, qv, S, P, logP = self.G[i], self.QV[i], self.S[i], self.P[i], self.logP[i]
            f = self.actions[:, i]
            dg = np.zeros_like(g)
            if i + 1 < n_select:
                # g_{i+1} = tanh(W_g g_i + W_u V[f_i])
                g_next = self.G[i + 1]
                da = dg_next * (1.0 - g_next * g_next)
                grads.W_g += da.T @ g
                grads.W_u += da.T @ V[f]
                np.add.at(dV, f, da @ p.W_u)
                dg += da @ p.W_g
            H = self.step_H[:, i]
            dl = -w_logp[:, None] * P
            dl[rows, f] += w_logp
            dl += w_H[:, i, None] * (-P * (logP + H[:, None]))
            ds += float(np.sum(dl * S))
            dS = s * dl * self.scale
            dqv = dS @ K
            dK += dS.T @ qv
            grads.W_q += dqv.T @ g
            dg += dqv @ p.W_q
            dg_next = dg
        grads.s += ds

        da0 = dg_next.sum(axis=0) * (1.0 - self.g0 * self.g0)
        grads.W_c += np.outer(da0, self.episode.query)
        grads.u0 += da0

        grads.W_k += dK.T @ E
        grads.W_v += dV.T @ E
        grads.b_v += dV.sum(axis=0)
        dh = dK @ p.W_k + dV @ p.W_v

        X = self.episode.frames
        hidden = self.emb.hidden
        for l in range(len(hidden) - 1, -1, -1):
            h = hidden[l]
            da = dh * (1.0 - h * h)
            grads.A += da.T @ X[:, l]
            if l > 0:
                grads.B += da.T @ hidden[l - 1]
                dh = da @ p.B
            # h_0 = 0, so the first token contributes nothing to dB


def sample_subsets(params: PolicyParams, episode: Episode, n_select: int, n_candidates: int,
                   seed: int, return_probs: bool = False):
    """Draw ``n_candidates`` ordered subsets of ``n_select`` distinct frames.

    Candidate j uses its own RNG stream keyed by (seed, episode id, j). With
    ``return_probs`` the (N, T', T) per-step distributions are returned too.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    if n_select < 1 or n_select > episode.T:
        raise ValueError(f"n_select={n_select} must lie in [1, T={episode.T}]")
    u = _candidate_uniforms(seed, episode.id, n_candidates, n_select)
    ro = _Rollout(params, episode, n_select, uniforms=u)
    out = [
        CandidateSubset(
            indices=ro.actions[j].copy(),
            time_sorted=np.sort(ro.actions[j]),
            step_logps=ro.step_logp[j].copy(),
            step_entropies=ro.step_H[j].copy(),
        )
        for j in range(n_candidates)
    ]
    if return_probs:
        return out, np.stack(ro.P, axis=1)
    return out


def subset_logprob(params: PolicyParams, episode: Episode, subset: Sequence[int]):
    """Log-probability of an ordered subset and its per-step entropies."""
    idx = check_subset(subset, episode.T)
    if idx.size == 0:
        raise ValueError("empty subset")
    ro = _Rollout(params, episode, idx.size, actions=idx[None, :])
    return float(ro.step_logp[0].sum()), ro.step_H[0].copy()


def _as_actions(subsets, T: int) -> np.ndarray:
    acts = np.asarray(subsets, dtype=np.int64)
    if acts.ndim != 2:
        raise ValueError(f"subsets must be (N, T'), got shape {acts.shape}")
    for row in acts:
        check_subset(row, T)
    return acts


def objective_and_gradient(params: PolicyParams, batch: Sequence[BatchItem], beta: float,
                           entropy_mode: str = "mean"):
    """Importance-weighted advantage objective plus entropy bonus, and its exact gradient.

    J = mean_j ratio_j * A_j + beta * Hbar, with ratio_j = exp(logp_j - old_logp_j).
    Hbar averages the per-step conditional entropy over every step and
    candidate (``entropy_mode="mean"``) or sums over steps and averages over
    candidates (``"sum"``).
    """
    if entropy_mode not in ("mean", "sum"):
        raise ValueError(f"entropy_mode must be 'mean' or 'sum', got {entropy_mode!r}")
    if not batch:
        raise ValueError("empty batch")
    rollouts = []
    for item in batch:
        acts = _as_actions(item.subsets, item.episode.T)
        adv = np.asarray(item.advantages, dtype=np.float64)
        old = np.asarray(item.old_logps, dtype=np.float64)
        if adv.shape != (acts.shape[0],) or old.shape != (acts.shape[0],):
            raise ValueError(
                f"{item.episode.id}: advantages/old_logps must have shape ({acts.shape[0]},), "
                f"got {adv.shape} and {old.shape}"
            )
        rollouts.append((_Rollout(params, item.episode, acts.shape[1], actions=acts), adv, old))

    n_total = sum(ro.actions.shape[0] for ro, _, _ in rollouts)
    J = 0.0
    grads = params.zeros_like()
    for ro, adv, old in rollouts:
        n_select = ro.actions.shape[1]
        h_weight = beta / n_total / (n_select if entropy_mode == "mean" else 1)
        ratio = np.exp(ro.step_logp.sum(axis=1) - old)
        J += float(np.sum(ratio * adv)) / n_total + h_weight * float(ro.step_H.sum())
        ro.backward(ratio * adv / n_total, h_weight, grads)
    return J, grads
