import numpy as np
import pytest

from dystyle import tensor as T
from dystyle.gradsuite import CHECKS, STEPS, run_suite, straddles_kink, tiny_world_config
from dystyle.world import world_build


def test_short_suite_covers_every_check():
    results = run_suite(seed=3, configs=4)
    assert [r.name for r in results] == list(CHECKS)
    for r in results:
        assert r.ok and r.total == 4 and r.worst < 1e-4, r


def test_suite_is_deterministic():
    a = run_suite(seed=5, configs=3, checks=("total", "dmac"))
    b = run_suite(seed=5, configs=3, checks=("total", "dmac"))
    assert [(r.worst, r.redrawn) for r in a] == [(r.worst, r.redrawn) for r in b]


def test_corrupted_logsumexp_adjoint_fails_the_contrastive_check(monkeypatch):
    def bad(a):
        x = a.data
        m = np.max(x, axis=-1, keepdims=True)
        e = np.exp(x - m)
        s = np.sum(e, axis=-1, keepdims=True)
        # drops the normalisation in the adjoint
        return T._emit("logsumexp", (a,), (m + np.log(s))[..., 0], lambda g: (g[..., None] * e,))

    monkeypatch.setattr(T, "logsumexp", bad)
    (res,) = run_suite(seed=0, configs=5, checks=("dmac",))
    assert res.passed < res.total


def test_corrupted_softmax_adjoint_fails_the_forward_check(monkeypatch):
    real = T.softmax

    def bad(a, mask=None):
        out = real(T.as_tensor(a.data), mask=mask).data
        return T._emit("softmax", (a,), out, lambda g: (g * out,))

    monkeypatch.setattr(T, "softmax", bad)
    (res,) = run_suite(seed=0, configs=5, checks=("forward_latent",))
    assert res.passed < res.total


def test_kink_screen_uses_values_only():
    eps = 1e-5
    assert straddles_kink(lambda t: T.sum_(T.abs_(t)), np.array([0.3, 2e-6]), eps)
    assert not straddles_kink(lambda t: T.sum_(T.abs_(t)), np.array([0.3, 2e-3]), eps)
    assert not straddles_kink(lambda t: T.sum_(T.tanh(t)), np.array([0.0, 1.0]), eps)


def test_kink_screen_catches_a_small_slope_jump():
    # a 0.1% slope change: the one-sided slopes agree within 1e-2, the branch log does not
    f = lambda t: T.sum_(t + 1e-3 * T.relu(t))
    assert straddles_kink(f, np.array([0.5, 3e-6]), 1e-5)
    assert not straddles_kink(f, np.array([0.5, 3e-3]), 1e-5)


def test_network_checks_use_the_larger_step():
    assert STEPS["forward_params"] > STEPS["dmac"]
    assert set(STEPS) == set(CHECKS)


def test_tiny_world_is_buildable():
    world = world_build(0, tiny_world_config())
    assert world.config.feature_dim == 16 and world.config.layers == 2


def test_unknown_check_rejected():
    with pytest.raises(ValueError, match="nope"):
        run_suite(configs=1, checks=("nope",))
