import struct
import zlib

import numpy as np
import pytest

from dystyle.checkpoint import (
    MAGIC,
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from dystyle.trainer import TrainConfig, run_two_stage, train_step, with_overrides
from dystyle.world import world_build


@pytest.fixture(scope="module")
def world():
    return world_build(0)


@pytest.fixture(scope="module")
def bundle(world):
    cfg = with_overrides(TrainConfig(stage1_steps=3, stage2_steps=3, seed=5), unified_dim=8, alpha_dmac=0.3)
    return run_two_stage(cfg, world)


def test_round_trip_is_bit_exact(bundle, tmp_path):
    path = tmp_path / "c.dys"
    save_checkpoint(bundle, path)
    back = load_checkpoint(path)
    assert list(back.params.arrays) == list(bundle.params.arrays)
    for k, a in bundle.params.arrays.items():
        assert back.params.arrays[k].tobytes() == a.tobytes()
        assert back.state.opt.m[k].tobytes() == bundle.state.opt.m[k].tobytes()
        assert back.state.opt.v[k].tobytes() == bundle.state.opt.v[k].tobytes()
    assert back.state.opt.t == bundle.state.opt.t == 6
    assert back.state.step == 6
    assert back.config == bundle.config
    assert back.world_seed == 0 and back.world_config == bundle.world_config
    assert back.manifest_digest == bundle.manifest_digest
    assert back.state.latent_digest == bundle.state.latent_digest
    assert back.state.rng_latent.bit_generator.state == bundle.state.rng_latent.bit_generator.state
    assert back.state.rng_spec.bit_generator.state == bundle.state.rng_spec.bit_generator.state
    assert encode_checkpoint(back) == path.read_bytes()


def test_loaded_state_continues_identically(bundle, world):
    a = decode_checkpoint(encode_checkpoint(bundle))
    b = decode_checkpoint(encode_checkpoint(bundle))
    row_a = train_step(a.state, world, a.config)
    row_b = train_step(b.state, world, b.config)
    assert row_a == row_b and a.params == b.params


def test_header_layout(bundle):
    data = encode_checkpoint(bundle)
    assert data[:4] == MAGIC == b"DYS1"
    assert struct.unpack("<I", data[4:8]) == (1,)
    assert data[8:40] == bundle.manifest_digest
    assert struct.unpack("<I", data[-4:]) == (zlib.crc32(data[:-4]),)


def test_corrupted_tensor_byte_is_rejected(bundle):
    data = bytearray(encode_checkpoint(bundle))
    for offset in (60, 1000, len(data) // 2, len(data) - 10):
        bad = bytearray(data)
        bad[offset] ^= 0x40
        with pytest.raises(CheckpointChecksumError):
            decode_checkpoint(bytes(bad))


def test_bad_magic_and_version(bundle):
    data = encode_checkpoint(bundle)
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(b"XXXX" + data[4:])
    newer = data[:4] + struct.pack("<I", 2) + data[8:]
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(newer)


@pytest.mark.parametrize("keep", [0, 6, 45, 500, -1])
def test_truncation_is_reported(bundle, keep):
    data = encode_checkpoint(bundle)
    cut = data[:keep] if keep >= 0 else data[:-9]
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(cut)


def test_failed_save_leaves_previous_file(bundle, tmp_path):
    path = tmp_path / "c.dys"
    save_checkpoint(bundle, path)
    before = path.read_bytes()
    original = bundle.manifest_digest
    bundle.manifest_digest = b"short"
    try:
        with pytest.raises(ValueError):
            save_checkpoint(bundle, path)
    finally:
        bundle.manifest_digest = original
    assert path.read_bytes() == before


def test_distinct_runs_give_distinct_files(world):
    a = run_two_stage(TrainConfig(stage1_steps=1, stage2_steps=1, seed=0), world)
    b = run_two_stage(TrainConfig(stage1_steps=1, stage2_steps=1, seed=1), world)
    assert encode_checkpoint(a) != encode_checkpoint(b)
    assert not np.array_equal(a.params.arrays["mod.w"], b.params.arrays["mod.w"])
