import numpy as np
import pytest

from framepo.optim import AdamWConfig, OptimizerState, clip_by_global_norm, linear_schedule, optimizer_step
from framepo.policy import PolicyDims, init_params


@pytest.fixture
def params():
    return init_params(PolicyDims(d_in=3, d_q=2, d_e=3, d_model=3, d_g=2), 0)


def test_schedule_shape():
    assert linear_schedule(0, 100, 0.05) == 0.0
    assert linear_schedule(5, 100, 0.05) == 1.0
    assert linear_schedule(2, 100, 0.05) == pytest.approx(0.4)
    assert linear_schedule(52, 100, 0.05) == pytest.approx(48 / 95)
    assert linear_schedule(100, 100, 0.05) == 0.0
    assert linear_schedule(0, 10, 0.0) == 1.0


def test_clip_scales_to_max_norm(params):
    g = params.map(lambda v: np.ones_like(v))
    norm = g.global_norm()
    clipped, pre = clip_by_global_norm(g.map(lambda v: v * 10 / norm), 1.0)
    assert pre == pytest.approx(10.0)
    assert clipped.global_norm() == pytest.approx(1.0)
    for _, v in clipped.items():
        assert np.allclose(v, 1 / norm)
    same, _ = clip_by_global_norm(g.map(lambda v: v * 0.5 / norm), 1.0)
    assert same.global_norm() == pytest.approx(0.5)


def test_first_step_at_zero_lr_moves_nothing(params):
    before = params.copy()
    cfg = AdamWConfig(total_updates=10, warmup_ratio=0.1, grad_clip=0.0)
    g = params.map(lambda v: np.full_like(v, 0.3))
    state = OptimizerState.zeros(params)
    _, mult, _ = optimizer_step(state, params, g, cfg)
    assert mult == 0.0
    for name, v in params.items():
        assert np.array_equal(v, getattr(before, name))
    assert state.step == 1
    assert np.allclose(state.m.A, 0.03)


def test_first_effective_step_is_signed_lr(params):
    before = params.copy()
    cfg = AdamWConfig(lr_heads=1e-3, lr_backbone=1e-4, weight_decay=0.0, grad_clip=0.0,
                      warmup_ratio=0.0, total_updates=10)
    rng = np.random.default_rng(0)
    # |g| >= 0.5 >> adam eps, so the step is -lr * sign(g) up to eps / |g|
    g = params.map(lambda v: rng.choice([-1.0, 1.0], np.shape(v)) * (0.5 + rng.random(np.shape(v))))
    optimizer_step(OptimizerState.zeros(params), params, g, cfg)
    for name, v in params.items():
        lr = 1e-4 if name in ("A", "B") else 1e-3
        delta = v - getattr(before, name)
        assert np.allclose(delta, -lr * np.sign(getattr(g, name)), rtol=1e-6, atol=0)


def test_weight_decay_only_on_matrices(params):
    before = params.copy()
    cfg = AdamWConfig(lr_heads=0.1, weight_decay=0.5, warmup_ratio=0.0, total_updates=10)
    optimizer_step(OptimizerState.zeros(params), params, params.zeros_like(), cfg)
    assert np.allclose(params.W_k, before.W_k * (1 - 0.1 * 0.5))
    assert np.array_equal(params.u0, before.u0)
    assert float(params.s) == float(before.s)


def test_non_finite_gradient_raises(params):
    g = params.zeros_like()
    g.u0[0] = np.nan
    with pytest.raises(FloatingPointError):
        optimizer_step(OptimizerState.zeros(params), params, g, AdamWConfig())
