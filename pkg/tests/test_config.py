import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dystyle.config import FIELDS, ConfigError, RunConfig, load_config, parse_config
from dystyle.trainer import TrainConfig
from dystyle.world import WorldConfig


def test_empty_text_gives_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.alpha_yaw == 0.05 and cfg.lr == 1e-4 and cfg.batch == 8
    assert cfg.beta1 == 0.5 and cfg.beta2 == 0.99
    assert cfg.stage1_steps == 2000 and cfg.stage2_steps == 4000


def test_defaults_agree_with_component_configs():
    cfg = RunConfig()
    assert cfg.train_config() == TrainConfig()
    assert cfg.world_config() == WorldConfig()


def test_every_field_is_documented():
    for f in FIELDS.values():
        assert f.metadata["section"] in ("train", "world", "loss", "eval")
        assert f.metadata["doc"]


def test_section_override_touches_one_field():
    cfg = parse_config("[loss]\nalpha_dmac = 0.2\n")
    assert cfg.alpha_dmac == 0.2
    assert dataclasses.replace(cfg, alpha_dmac=RunConfig().alpha_dmac) == RunConfig()
    assert cfg.train_config().weights.alpha_dmac == 0.2


def test_comments_and_keys_outside_sections():
    cfg = parse_config("# run\nlr = 3e-4  # faster\n\n[world]\nworld_seed = 9\n[eval]\nvariants = full, no_ca\n")
    assert cfg.lr == 3e-4 and cfg.world_seed == 9
    assert cfg.variant_list() == ["full", "no_ca"]


@pytest.mark.parametrize(
    "text, line, key",
    [
        ("alpha_yaw = abc", 1, "alpha_yaw"),
        ("[train]\nbatch = 8\nbatch = 4", 3, "batch"),
        ("[train]\n\nlearning_rate = 1", 3, "learning_rate"),
        ("[loss]\nlr = 1e-3", 2, "lr"),
        ("[train]\nstatic = maybe", 2, "static"),
        ("[train]\nseed = -1", 2, "seed"),
    ],
)
def test_errors_name_line_and_key(text, line, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line and info.value.key == key
    assert str(info.value).startswith(f"line {line}:")
    assert key in str(info.value)


@pytest.mark.parametrize("text", ["[bogus]", "[train", "just words"])
def test_structural_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_round_trip_of_defaults_and_changes(tmp_path):
    cfg = dataclasses.replace(RunConfig(), lr=3.3e-5, static=True, variants="full,static_arch", feature_gain=0.125)
    assert parse_config(cfg.to_text()) == cfg
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg


@settings(max_examples=40, deadline=None)
@given(
    st.floats(1e-8, 1.0),
    st.integers(0, 2**63),
    st.booleans(),
    st.floats(0, 10),
)
def test_round_trip_property(lr, seed, ca, alpha):
    cfg = dataclasses.replace(RunConfig(), lr=lr, seed=seed, cross_attention=ca, alpha_norm=alpha)
    assert parse_config(cfg.to_text()) == cfg


def test_train_config_routes_network_and_loss_keys():
    cfg = parse_config("cross_attention = false\nunified_dim = 8\nalpha_age = 0.5\nthreshold_yaw = 1.5\nsingle_stage = true")
    tc = cfg.train_config()
    assert not tc.net.cross_attention and tc.net.unified_dim == 8
    assert tc.weights.alpha_numeric["age"] == 0.5 and tc.weights.thresholds["yaw"] == 1.5
    assert tc.single_stage
