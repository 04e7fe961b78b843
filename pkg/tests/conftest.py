import numpy as np
import pytest

from framepo.policy import PolicyDims, init_params
from framepo.synthenv import EnvConfig, gen_episode

_ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}")


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the end-of-run summary."""
    def record(number, name, ok, detail=""):
        _ACCEPTANCE.append((number, name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}")
        return ok
    return record


@pytest.fixture
def small_env():
    return EnvConfig(T=10, L=2, d_in=4, d_q=3, M=3, n_needle=2)


@pytest.fixture
def small_dims():
    return PolicyDims(d_in=4, d_q=3, d_e=3, d_model=4, d_g=3)


@pytest.fixture
def small_episode(small_env):
    return gen_episode(small_env, 3)


def randomize(params, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return params.map(lambda v: v + scale * rng.standard_normal(np.shape(v)))


@pytest.fixture
def random_params(small_dims):
    return randomize(init_params(small_dims, 1), 2)


def uniform_params(dims, seed=0):
    """A scorer whose logits are identically zero, so every step is uniform."""
    p = init_params(dims, seed)
    p.W_q[...] = 0.0
    return p
