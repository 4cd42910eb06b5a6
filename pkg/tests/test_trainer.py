import itertools

import numpy as np
import pytest

from dystyle.checkpoint import load_checkpoint
from dystyle.losses import LossWeights
from dystyle.net import DyStyleParams
from dystyle.trainer import (
    AdamState,
    NonFiniteError,
    TrainConfig,
    TrainState,
    adam_update,
    clip_global_norm,
    compute_gradients,
    metric_columns,
    run_two_stage,
    sample_attribute_config,
    train_step,
    with_overrides,
)
from dystyle.world import AttributeSpec, sample_latent, world_build


@pytest.fixture(scope="module")
def world():
    return world_build(0)


def short(**kw):
    base = dict(stage1_steps=4, stage2_steps=6, checkpoint_every=3)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- sampler


def test_stage1_activates_one_attribute(world):
    rng = np.random.default_rng(0)
    counts = {}
    for _ in range(5000):
        spec = sample_attribute_config(1, rng, world.config)
        (name,) = spec.active(world.config)
        counts[name] = counts.get(name, 0) + 1
    assert set(counts) == {a.name for a in world.config.attributes}
    assert all(abs(c / 5000 - 0.2) < 0.03 for c in counts.values())


def test_stage2_subsets_are_uniform(world):
    rng = np.random.default_rng(1)
    names = [a.name for a in world.config.attributes]
    n = 100_000
    counts = {}
    yaw = []
    for _ in range(n):
        spec = sample_attribute_config(2, rng, world.config)
        key = tuple(spec.active(world.config))
        counts[key] = counts.get(key, 0) + 1
        if "yaw" in spec.numeric:
            yaw.append(spec.numeric["yaw"])
    subsets = {tuple(x for x in names if x in c) for r in range(1, 6) for c in itertools.combinations(names, r)}
    assert set(counts) == subsets and len(subsets) == 31
    freq = np.array(list(counts.values())) / n
    assert np.all(np.abs(freq - 1 / 31) < 0.01)
    assert abs(np.mean(yaw)) < 0.3
    assert min(yaw) >= -30 and max(yaw) <= 30


def test_sampler_rejects_unknown_stage(world):
    with pytest.raises(ValueError):
        sample_attribute_config(3, np.random.default_rng(0), world.config)


# ---------------------------------------------------------------- optimizer


def _toy(shape=(3, 2), seed=0):
    return DyStyleParams({"p": np.random.default_rng(seed).normal(size=shape)})


def test_adam_zero_gradient_is_fixed_point():
    params = _toy()
    before = params.arrays["p"].copy()
    state = AdamState.zeros_like(params)
    for _ in range(5):
        adam_update(params, {"p": np.zeros((3, 2))}, state, TrainConfig())
    np.testing.assert_array_equal(params.arrays["p"], before)
    assert state.t == 5


def test_adam_matches_hand_iteration():
    cfg = TrainConfig(lr=1e-2)
    params = _toy()
    start = params.arrays["p"].copy()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(3)
    grads = [rng.normal(size=(3, 2)) for _ in range(4)]
    for g in grads:
        adam_update(params, {"p": g.copy()}, state, cfg)
    # scalar-by-scalar reference
    expected = start.copy()
    for idx in np.ndindex(start.shape):
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            m = 0.5 * m + 0.5 * g[idx]
            v = 0.99 * v + 0.01 * g[idx] ** 2
            expected[idx] -= 1e-2 * (m / (1 - 0.5**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
    np.testing.assert_allclose(params.arrays["p"], expected, rtol=1e-13, atol=1e-15)


def test_adam_constant_gradient_steps_by_learning_rate():
    cfg = TrainConfig(lr=1e-3)
    params = _toy((4,))
    state = AdamState.zeros_like(params)
    g = np.array([3.0, -0.2, 1e-3, 50.0])
    for _ in range(200):
        before = params.arrays["p"].copy()
        adam_update(params, {"p": g.copy()}, state, cfg)
    step = before - params.arrays["p"]
    np.testing.assert_allclose(step, cfg.lr * np.sign(g), rtol=1e-4)


def test_adam_rejects_non_finite_gradient():
    params = _toy()
    g = np.zeros((3, 2))
    g[1, 1] = np.nan
    with pytest.raises(NonFiniteError, match="'p'"):
        adam_update(params, {"p": g}, AdamState.zeros_like(params), TrainConfig())


def test_clip_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert clip_global_norm(grads, 10.0) == 5.0
    np.testing.assert_array_equal(grads["a"], [3.0, 0.0])
    assert clip_global_norm(grads, 1.0) == 5.0
    np.testing.assert_allclose(grads["a"], [0.6, 0.0])
    np.testing.assert_allclose(grads["b"], [[0.8]])


def test_config_validation():
    for bad in (dict(batch=0), dict(lr=0.0), dict(beta1=1.0), dict(stage1_steps=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    cfg = with_overrides(TrainConfig(), cross_attention=False, alpha_dmac=0.0, lr=2e-4)
    assert not cfg.net.cross_attention and cfg.weights.alpha_dmac == 0.0 and cfg.lr == 2e-4


# ---------------------------------------------------------------- steps


def test_empty_spec_batch_moves_nothing(world):
    cfg = TrainConfig()
    state = TrainState.fresh(world, cfg)
    w = sample_latent(np.random.default_rng(0), 8, 6, 32)
    grads, parts = compute_gradients(state.params, w, [AttributeSpec()] * 8, world, cfg)
    assert all(not np.any(g) for g in grads.values())
    assert parts["total"] == pytest.approx(cfg.weights.alpha_norm * parts["norm"], rel=1e-12)


def test_first_step_only_reaches_modulation_head(world):
    cfg = TrainConfig()
    state = TrainState.fresh(world, cfg)
    rng = np.random.default_rng(1)
    w = sample_latent(rng, 8, 6, 32)
    specs = [sample_attribute_config(1, rng, world.config) for _ in range(8)]
    grads, _ = compute_gradients(state.params, w, specs, world, cfg)
    touched = {k for k, g in grads.items() if np.any(g)}
    assert touched == {"mod.w", "mod.b"}


def test_inactive_experts_receive_zero_gradient(world):
    cfg = TrainConfig()
    state = TrainState.fresh(world, cfg)
    rng = np.random.default_rng(2)
    for _ in range(5):
        train_step(state, world, cfg)
    for _ in range(20):
        w = sample_latent(rng, 8, 6, 32)
        specs = [sample_attribute_config(int(rng.integers(1, 3)), rng, world.config) for _ in range(8)]
        active = {n for s in specs for n in s.active(world.config)}
        grads, _ = compute_gradients(state.params, w, specs, world, cfg)
        for name, g in grads.items():
            if name.startswith("expert."):
                attr = name.split(".")[1]
                assert np.any(g) == (attr in active), name


def test_step_leaves_world_untouched_and_counts(world):
    cfg = TrainConfig()
    digest = world.weights_digest()
    state = TrainState.fresh(world, cfg)
    row = train_step(state, world, cfg)
    assert world.weights_digest() == digest
    assert state.step == 1 and state.opt.t == 1
    assert set(metric_columns(world.config)) <= set(row)
    for k, a in state.params.arrays.items():
        assert state.opt.m[k].shape == a.shape


def test_non_finite_loss_aborts(world):
    cfg = TrainConfig()
    state = TrainState.fresh(world, cfg)
    state.params.arrays["mod.b"][0, 0, 0] = np.inf
    w = sample_latent(np.random.default_rng(3), 8, 6, 32)
    with pytest.raises(NonFiniteError):
        compute_gradients(state.params, w, [AttributeSpec.of(world.config, yaw=10.0)] * 8, world, cfg)


# ---------------------------------------------------------------- runs


def test_run_writes_one_metrics_row_per_step(world, tmp_path):
    cfg = short()
    bundle = run_two_stage(cfg, world, out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == metric_columns(world.config)
    assert len(lines) == 1 + cfg.total_steps
    assert [r["stage"] for r in bundle.metrics] == [1] * 4 + [2] * 6
    assert all(r["n_active"] == 1.0 for r in bundle.metrics[:4])
    for name in ("stage1.dys", "step000003.dys", "step000006.dys", "step000009.dys", "final.dys"):
        assert (tmp_path / name).exists(), name


def test_single_stage_samples_subsets_throughout(world):
    bundle = run_two_stage(short(single_stage=True), world)
    assert all(r["stage"] == 2 for r in bundle.metrics)


def test_identical_seeds_give_identical_metrics(world, tmp_path):
    run_two_stage(short(), world, out_dir=tmp_path / "a")
    run_two_stage(short(), world, out_dir=tmp_path / "b")
    run_two_stage(short(seed=1), world, out_dir=tmp_path / "c")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a != (tmp_path / "c" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "final.dys").read_bytes() == (tmp_path / "b" / "final.dys").read_bytes()


def test_resume_from_stage_boundary_is_bit_exact(world, tmp_path):
    cfg = short()
    straight = run_two_stage(cfg, world)
    run_two_stage(cfg, world, out_dir=tmp_path, until=cfg.stage1_steps)
    loaded = load_checkpoint(tmp_path / "stage1.dys")
    assert loaded.state.step == cfg.stage1_steps
    resumed = run_two_stage(loaded.config, world, state=loaded.state)
    assert resumed.params == straight.params
    assert resumed.state.latent_digest == straight.state.latent_digest
    assert resumed.state.spec_digest == straight.state.spec_digest
    assert resumed.metrics == straight.metrics[cfg.stage1_steps:]
    for k in straight.state.opt.m:
        np.testing.assert_array_equal(resumed.state.opt.m[k], straight.state.opt.m[k])
        np.testing.assert_array_equal(resumed.state.opt.v[k], straight.state.opt.v[k])


def test_zero_weight_run_is_a_no_op_on_experts(world):
    zero = LossWeights(
        alpha_numeric={"yaw": 0.0, "pitch": 0.0, "age": 0.0}, alpha_binary=0.0, alpha_id=0.0, alpha_norm=0.0, alpha_dmac=0.0
    )
    cfg = short(weights=zero)
    init = TrainState.fresh(world, cfg).params
    bundle = run_two_stage(cfg, world)
    assert bundle.params == init
