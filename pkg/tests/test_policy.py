import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import randomize, uniform_params
from framepo.policy import (
    BatchItem,
    PolicyDims,
    frame_embeddings,
    init_params,
    objective_and_gradient,
    sample_subsets,
    step_distribution,
    subset_logprob,
)
from framepo.synthenv import EnvConfig, gen_episode


def entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def test_init_values():
    dims = PolicyDims(d_in=6, d_q=4, d_e=5, d_model=7, d_g=5)
    p = init_params(dims, 0)
    assert float(p.s) == 1.0
    assert not p.b_v.any()
    assert np.allclose(p.A @ p.A.T, np.eye(5))
    assert np.allclose(p.B @ p.B.T, 0.25 * np.eye(5))
    assert np.allclose(p.W_k.T @ p.W_k, np.eye(5))
    assert p.dims == dims
    assert np.array_equal(init_params(dims, 0).W_q, p.W_q)
    assert not np.array_equal(init_params(dims, 1).W_q, p.W_q)


def test_dims_reject_zero():
    with pytest.raises(ValueError):
        PolicyDims(d_e=0)


def test_embedding_single_token_is_tanh_projection(small_dims):
    ep = gen_episode(EnvConfig(T=6, L=1, d_in=4, d_q=3), 0)
    p = randomize(init_params(small_dims, 0), 1)
    emb = frame_embeddings(p, ep)
    assert np.allclose(emb.E, np.tanh(ep.frames[:, 0] @ p.A.T))
    assert np.allclose(emb.K, emb.E @ p.W_k.T)
    assert np.allclose(emb.V, emb.E @ p.W_v.T + p.b_v)


def test_embedding_zero_and_identical_frames(small_dims, small_episode, random_params):
    ep = small_episode
    ep.frames[:] = 0.0
    emb = frame_embeddings(random_params, ep)
    assert not emb.E.any()
    assert np.allclose(emb.V, random_params.b_v)
    ep.frames[:] = np.arange(ep.L * ep.d_in).reshape(ep.L, ep.d_in) / 10
    emb = frame_embeddings(random_params, ep)
    assert np.allclose(emb.K, emb.K[0])


def test_step_distribution_uniform_and_masked(small_dims):
    p = uniform_params(small_dims)
    K = np.random.default_rng(0).standard_normal((5, small_dims.d_model))
    g = np.ones(small_dims.d_g)
    assert step_distribution(p, K, g, []) == pytest.approx([0.2] * 5)
    q = step_distribution(p, K, g, [1, 3])
    assert q.tolist() == pytest.approx([1 / 3, 0, 1 / 3, 0, 1 / 3])
    with pytest.raises(ValueError):
        step_distribution(p, K, g, range(5))


def test_step_distribution_matches_explicit_softmax(random_params, small_dims):
    rng = np.random.default_rng(3)
    K = rng.standard_normal((6, small_dims.d_model))
    g = rng.standard_normal(small_dims.d_g)
    logits = K @ (random_params.W_q @ g) * float(random_params.s) / math.sqrt(small_dims.d_model)
    e = np.exp(logits - logits.max())
    e[2] = 0.0
    assert step_distribution(random_params, K, g, [2]) == pytest.approx(e / e.sum(), abs=1e-12)


def test_entropy_decreases_with_scale(random_params, small_dims):
    rng = np.random.default_rng(4)
    K = rng.standard_normal((12, small_dims.d_model))
    g = rng.standard_normal(small_dims.d_g)
    hs = []
    for s in [0.25, 0.5, 1, 2, 4, 8]:
        p = random_params.copy()
        p.s = np.array(float(s))
        hs.append(entropy(step_distribution(p, K, g, [])))
    assert all(a >= b for a, b in zip(hs, hs[1:]))
    assert hs[0] <= math.log(12) + 1e-12


def test_full_selection_is_a_permutation(small_episode, random_params):
    subs = sample_subsets(random_params, small_episode, small_episode.T, 5, seed=0)
    for s in subs:
        assert sorted(s.indices.tolist()) == list(range(small_episode.T))
        assert s.step_entropies[-1] == pytest.approx(0.0, abs=1e-12)
        assert s.step_logps[-1] == pytest.approx(0.0, abs=1e-12)


def test_sampling_rejects_bad_sizes(small_episode, random_params):
    with pytest.raises(ValueError):
        sample_subsets(random_params, small_episode, small_episode.T + 1, 2, seed=0)
    with pytest.raises(ValueError):
        sample_subsets(random_params, small_episode, 2, 0, seed=0)


def test_two_frames_single_pick_logp(small_dims):
    ep = gen_episode(EnvConfig(T=2, L=2, d_in=4, d_q=3, M=3, n_needle=1), 0)
    p = uniform_params(small_dims)
    for s in sample_subsets(p, ep, 1, 8, seed=1):
        assert s.logp == pytest.approx(math.log(0.5), abs=1e-12)


def test_uniform_policy_ordered_pairs_are_uniform(small_dims):
    ep = gen_episode(EnvConfig(T=4, L=1, d_in=4, d_q=3, M=3, n_needle=1), 0)
    subs = sample_subsets(uniform_params(small_dims), ep, 2, 12_000, seed=5)
    counts = Counter(tuple(s.indices.tolist()) for s in subs)
    assert len(counts) == 12
    for c in counts.values():
        assert abs(c / 12_000 - 1 / 12) < 0.01
    assert all(s.logp == pytest.approx(math.log(1 / 12)) for s in subs[:20])


def test_sampling_deterministic_and_streams_independent(small_episode, random_params):
    a = sample_subsets(random_params, small_episode, 4, 6, seed=9)
    b = sample_subsets(random_params, small_episode, 4, 6, seed=9)
    c = sample_subsets(random_params, small_episode, 4, 3, seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.indices, y.indices)
    # candidate j's stream does not depend on how many candidates are drawn
    for x, y in zip(a, c):
        assert np.array_equal(x.indices, y.indices)
    other = replace(small_episode, id="another")
    d = sample_subsets(random_params, other, 4, 6, seed=9)
    assert any(not np.array_equal(x.indices, y.indices) for x, y in zip(a, d))


def test_replay_logprob_matches_sampling(small_episode, random_params):
    for s in sample_subsets(random_params, small_episode, 5, 8, seed=2):
        lp, H = subset_logprob(random_params, small_episode, s.indices)
        assert lp == pytest.approx(s.logp, abs=1e-12)
        assert H == pytest.approx(s.step_entropies, abs=1e-12)


def test_step_entropy_plus_kl_to_uniform_is_log_support(small_episode, random_params):
    subs, probs = sample_subsets(random_params, small_episode, 4, 3, seed=0, return_probs=True)
    T = small_episode.T
    for j, s in enumerate(subs):
        for t in range(4):
            p = probs[j, t]
            support = p > 0
            n = T - t
            assert support.sum() == n
            kl = float((p[support] * np.log(p[support] * n)).sum())
            assert s.step_entropies[t] + kl == pytest.approx(math.log(n), abs=1e-12)
            assert s.step_entropies[t] == pytest.approx(entropy(p), abs=1e-12)


def test_logprob_rejects_duplicates(small_episode, random_params):
    with pytest.raises(ValueError):
        subset_logprob(random_params, small_episode, [1, 1])
    with pytest.raises(ValueError):
        subset_logprob(random_params, small_episode, [0, small_episode.T])


def _batch(params, episodes, n_select, n, seed, adv_scale=1.0, old_shift=0.3):
    rng = np.random.default_rng(seed)
    out = []
    for ep in episodes:
        subs = sample_subsets(params, ep, n_select, n, seed=seed)
        acts = np.stack([s.indices for s in subs])
        lp = np.array([s.logp for s in subs])
        out.append(BatchItem(ep, acts, adv_scale * rng.standard_normal(n),
                             lp + old_shift * rng.standard_normal(n)))
    return out


def _fd_gradient(params, batch, beta, mode, h=1e-6):
    out = params.zeros_like()
    for name, v in params.items():
        g = getattr(out, name)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            up, _ = objective_and_gradient(params, batch, beta, mode)
            v[idx] = orig - h
            dn, _ = objective_and_gradient(params, batch, beta, mode)
            v[idx] = orig
            g[idx] = (up - dn) / (2 * h)
    return out


@pytest.mark.parametrize("mode, beta", [("mean", 0.3), ("sum", 0.05), ("mean", 0.0)])
def test_gradient_matches_finite_differences(small_dims, mode, beta):
    env = EnvConfig(T=9, L=3, d_in=4, d_q=3, M=3, n_needle=2)
    eps = [gen_episode(env, s) for s in (1, 2)]
    params = randomize(init_params(small_dims, 0), 5)
    batch = _batch(params, eps, 4, 3, seed=1)
    _, grad = objective_and_gradient(params, batch, beta, mode)
    fd = _fd_gradient(params, batch, beta, mode)
    for name, g in grad.items():
        ref = getattr(fd, name)
        err = np.linalg.norm(g - ref) / max(np.linalg.norm(ref), 1e-8)
        assert err < 1e-6, (name, err)


def test_entropy_only_gradient_matches_finite_differences(small_dims, small_episode):
    params = randomize(init_params(small_dims, 3), 6)
    batch = _batch(params, [small_episode], 3, 4, seed=2, adv_scale=0.0)
    J, grad = objective_and_gradient(params, batch, 1.0)
    assert J == pytest.approx(np.mean([
        np.mean(subset_logprob(params, small_episode, a)[1]) for a in batch[0].subsets
    ]), abs=1e-12)
    fd = _fd_gradient(params, batch, 1.0, "mean")
    for name, g in grad.items():
        assert np.allclose(g, getattr(fd, name), atol=1e-7), name


def test_zero_advantage_zero_gradient(small_episode, random_params):
    batch = _batch(random_params, [small_episode], 3, 5, seed=0, adv_scale=0.0)
    J, grad = objective_and_gradient(random_params, batch, 0.0)
    assert J == 0.0
    assert grad.global_norm() == 0.0


def test_reinforce_identity_at_unit_ratio(small_episode, random_params):
    # at ratio 1, dJ = mean_j A_j dlogp_j; each dlogp_j comes from a one-candidate batch
    batch = _batch(random_params, [small_episode], 3, 4, seed=3, old_shift=0.0)
    _, grad = objective_and_gradient(random_params, batch, 0.0)
    acc = random_params.zeros_like()
    item = batch[0]
    for j in range(4):
        single = BatchItem(item.episode, item.subsets[j:j + 1], np.ones(1), item.old_logps[j:j + 1])
        _, gj = objective_and_gradient(random_params, [single], 0.0)
        acc.add_(gj, item.advantages[j] / 4)
    for name, g in grad.items():
        assert np.allclose(g, getattr(acc, name), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(0.1, 10))
def test_gradient_linear_in_advantage_scale(c):
    dims = PolicyDims(d_in=4, d_q=3, d_e=3, d_model=4, d_g=3)
    ep = gen_episode(EnvConfig(T=10, L=2, d_in=4, d_q=3, M=3, n_needle=2), 3)
    params = randomize(init_params(dims, 1), 2)
    batch = _batch(params, [ep], 3, 4, seed=4)
    scaled = [BatchItem(b.episode, b.subsets, c * b.advantages, b.old_logps) for b in batch]
    _, g1 = objective_and_gradient(params, batch, 0.0)
    _, gc = objective_and_gradient(params, scaled, 0.0)
    for name, g in g1.items():
        assert np.allclose(c * g, getattr(gc, name), rtol=1e-9, atol=1e-12)


def test_objective_validates_shapes(small_episode, random_params):
    b = _batch(random_params, [small_episode], 3, 4, seed=0)[0]
    with pytest.raises(ValueError):
        objective_and_gradient(random_params, [BatchItem(b.episode, b.subsets, b.advantages[:2], b.old_logps)], 0.1)
    with pytest.raises(ValueError):
        objective_and_gradient(random_params, [b], 0.1, entropy_mode="max")
    with pytest.raises(ValueError):
        objective_and_gradient(random_params, [], 0.1)
    dup = b.subsets.copy()
    dup[0, 1] = dup[0, 0]
    with pytest.raises(ValueError):
        objective_and_gradient(random_params, [BatchItem(b.episode, dup, b.advantages, b.old_logps)], 0.1)


def test_single_step_favours_positive_advantage(small_episode, random_params):
    subs = sample_subsets(random_params, small_episode, 3, 2, seed=7)
    acts = np.stack([s.indices for s in subs])
    assert not np.array_equal(acts[0], acts[1])
    old = np.array([s.logp for s in subs])
    item = BatchItem(small_episode, acts, np.array([1.0, -1.0]), old)
    _, grad = objective_and_gradient(random_params, [item], 0.0)
    stepped = random_params.copy().add_(grad, 1e-3)
    gap = lambda p: subset_logprob(p, small_episode, acts[0])[0] - subset_logprob(p, small_episode, acts[1])[0]
    assert gap(stepped) > gap(random_params)
