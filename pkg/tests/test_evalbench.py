import dataclasses

import numpy as np
import pytest

from dystyle import evalbench as E
from dystyle.net import NetConfig
from dystyle.trainer import CheckpointBundle, TrainConfig, TrainState, run_two_stage
from dystyle.world import AttributeSpec, WorldConfig, sample_latent, world_build


@pytest.fixture(scope="module")
def world():
    return world_build(0)


@pytest.fixture(scope="module")
def evalset(world):
    return E.build_evalset(world, seed=1234, size=200)


def untrained(world):
    cfg = TrainConfig()
    return CheckpointBundle(TrainState.fresh(world, cfg), cfg, world.seed, world.config, world.manifest_digest())


def fixed_set(world, specs, seed=3):
    w = sample_latent(np.random.default_rng(seed), len(specs), world.config.layers, world.config.dim)
    w.flags.writeable = False
    return E.EvalSet(w, tuple(specs), seed, world.manifest_digest())


def test_evalset_is_deterministic_and_read_only(world, evalset):
    again = E.build_evalset(world, seed=1234, size=200)
    np.testing.assert_array_equal(again.latents, evalset.latents)
    assert again.specs == evalset.specs
    with pytest.raises(ValueError):
        evalset.latents[0, 0, 0] = 1.0
    arity = evalset.arity()
    assert np.all(arity[:100] == 1) and np.all(arity >= 1)
    assert np.any(arity[100:] >= 2)
    other = E.build_evalset(world, seed=1234, size=200, stream=E.VAL_STREAM)
    assert not np.array_equal(other.latents, evalset.latents)


def test_independent_probes_agree_with_world_functions(world, evalset):
    from dystyle.world import generate, identity_embed, predict_binary, predict_numeric

    f = E.features(world, evalset.latents[:20])
    np.testing.assert_allclose(f, generate(world, np.asarray(evalset.latents[:20])).data, atol=1e-14)
    np.testing.assert_allclose(E.measure_numeric(world, "age", f), predict_numeric(world, "age", f).data, atol=1e-12)
    np.testing.assert_allclose(E.measure_binary(world, f), predict_binary(world, f)[0].data, atol=1e-14)
    e = identity_embed(world, f).data
    cos = np.sum(e[:-1] * e[1:], axis=1) / np.linalg.norm(e[:-1], axis=1) / np.linalg.norm(e[1:], axis=1)
    np.testing.assert_allclose(E.identity_similarity(world, f[:-1], f[1:])[0], cos, atol=1e-14)


def test_no_op_edit_misses_by_full_target(world):
    es = fixed_set(world, [AttributeSpec({"yaw": 15.0})] * 10)
    rows = E.eval_control_accuracy(untrained(world), es, world)
    assert E.lookup(rows, "single", "yaw") == 15.0
    assert E.lookup(rows, "all", "yaw") == 15.0


def test_untrained_identity_is_exactly_one(world, evalset):
    report = E.eval_identity(untrained(world), evalset, world)
    assert report.mean == {"single": 1.0, "multi": 1.0, "all": 1.0}
    assert report.std["all"] == 0.0 and report.excluded == 0
    assert report.count["single"] + report.count["multi"] == report.count["all"] == 200


def test_oracle_editor_is_exact(world, evalset):
    rows = E.eval_control_accuracy(E.oracle_editor(world), evalset, world)
    for r in rows:
        if r.metric == "mae":
            assert r.value < 1e-9, r
        else:
            assert r.value == 1.0, r
    assert E.eval_identity(E.oracle_editor(world), evalset, world).mean["all"] == pytest.approx(1.0, abs=1e-12)


def test_antipodal_editor_gives_minus_one(world, evalset):
    report = E.eval_identity(lambda w, specs: -E.features(world, w), evalset, world)
    assert report.mean["all"] == pytest.approx(-1.0, abs=1e-12)


def test_degenerate_embeddings_are_excluded_and_counted(world, evalset):
    def editor(w, specs):
        f = E.features(world, w)
        f[:7] = 0.0
        return f

    report = E.eval_identity(editor, evalset, world)
    assert report.excluded == 7
    assert report.count["all"] == 193
    assert report.mean["all"] == 1.0


def test_manifest_mismatch(world, evalset):
    other = world_build(1)
    with pytest.raises(E.ManifestMismatchError):
        E.eval_control_accuracy(untrained(world), evalset, other)
    foreign = untrained(other)
    with pytest.raises(E.ManifestMismatchError):
        E.eval_identity(foreign, evalset, world)


def test_evaluation_is_pure(world, evalset):
    bundle = run_two_stage(TrainConfig(stage1_steps=3, stage2_steps=3), world)
    a = E.eval_control_accuracy(bundle, evalset, world)
    b = E.eval_control_accuracy(bundle, evalset, world)
    assert a == b
    assert E.eval_identity(bundle, evalset, world) == E.eval_identity(bundle, evalset, world)


def test_table_schema(world, evalset, tmp_path):
    rows = E.eval_control_accuracy(E.oracle_editor(world), evalset, world)
    keys = {(r.group, r.attribute) for r in rows}
    for group in ("single", "multi", "all"):
        for attr in ("yaw", "pitch", "age", "glasses", "smile"):
            assert (group, attr) in keys
    metrics = {r.attribute: r.metric for r in rows}
    assert metrics["yaw"] == "mae" and metrics["glasses"] == "accuracy"
    single = {r.attribute: r.count for r in rows if r.group == "single"}
    assert sum(single.values()) == int(np.sum(evalset.arity() == 1))
    table = E.control_table_rows(rows, E.eval_identity(E.oracle_editor(world), evalset, world))
    E.write_rows(table, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "group,attribute,metric,value,count"
    assert len(lines) == 1 + len(rows) + 6


def test_ablation_harness_pairs_streams(world, tmp_path):
    base = TrainConfig(stage1_steps=2, stage2_steps=2)
    evalset = E.build_evalset(world, size=20)
    valset = E.build_evalset(world, size=8, stream=E.VAL_STREAM)
    res = E.run_ablation(["full", "no_ca", "single_stage"], base, world, evalset, valset, curve_every=2, out_dir=tmp_path)
    v = res.variants
    assert v["full"].latent_digest == v["no_ca"].latent_digest == v["single_stage"].latent_digest
    assert v["full"].spec_digest == v["no_ca"].spec_digest != v["single_stage"].spec_digest
    assert [r["step"] for r in v["full"].curve] == [2, 4]
    for key in ("multi_glasses_accuracy", "all_yaw_mae", "all_identity", "val_id", "val_attr", "val_id_plus_attr"):
        assert key in v["full"].summary
    assert len(res.table()) == 3 and len(res.curves()) == 6
    assert (tmp_path / "no_ca" / "final.dys").exists()


def test_validation_losses_use_reference_weights(world):
    valset = E.build_evalset(world, size=16, stream=E.VAL_STREAM)
    cfg = TrainConfig()
    params = TrainState.fresh(world, cfg).params
    losses = E.validation_losses(params, world, valset, E.variant_config("no_id_loss", cfg), cfg)
    assert losses["id"] == pytest.approx(0.0, abs=1e-15)
    # untrained edits are no-ops, so the numeric terms are mean |target|
    assert losses["attr_yaw"] > 0
    assert losses["id_plus_attr"] == losses["id"] + losses["attr"]


def test_variant_table():
    assert set(E.VARIANTS) == {"full", "no_ca", "no_dmac", "no_ca_no_dmac", "static_arch", "single_stage", "no_id_loss"}
    base = TrainConfig()
    assert E.variant_config("full", base) == base
    assert E.variant_config("no_ca_no_dmac", base).net == dataclasses.replace(base.net, cross_attention=False)
    assert E.variant_config("no_ca_no_dmac", base).weights.alpha_dmac == 0.0
    assert E.variant_config("static_arch", base).net.static
    with pytest.raises(ValueError):
        E.variant_config("nope", base)


def test_cost_report(world):
    rows = E.cost_report(world.config)
    assert len(rows) == 32
    by_mask = {r["mask"]: r for r in rows}
    assert by_mask["-"]["cost"] == 0
    assert by_mask["yaw+pitch+age+glasses+smile"]["ratio"] == 1.0
    assert all(r["ratio"] < 0.5 for r in rows if r["active"] == 1)
    names = [a.name for a in world.config.attributes]
    for r in rows:
        subset = set(r["mask"].split("+")) - {"-"}
        for extra in set(names) - subset:
            bigger = "+".join(n for n in names if n in subset | {extra})
            assert by_mask[bigger]["cost"] >= r["cost"]
    for cfg in (WorldConfig(dim=16), WorldConfig(layers=3)):
        static = E.cost_report(cfg, NetConfig())
        assert static[-1]["ratio"] == 1.0
