"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"DYS1"
    u32   format version
    32B   sha256 of the world manifest
    u32   number of tensor records
    per record:
        u32 name length, name (utf-8)
        u32 rank, rank x u64 dims
        prod(dims) x f64 values
    u64   length of the state blob, state blob (utf-8 JSON: step, rng states,
          stream digests, train/world config)
    u32   CRC-32 of every preceding byte
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .losses import LossWeights
from .net import DyStyleParams, NetConfig
from .trainer import AdamState, CheckpointBundle, TrainConfig, TrainState
from .world import Attribute, WorldConfig

MAGIC = b"DYS1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file (bad magic)."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    d["net"] = NetConfig(**d["net"])
    return TrainConfig(**d)


def world_config_to_dict(c: WorldConfig) -> dict:
    return dataclasses.asdict(c)


def world_config_from_dict(d: dict) -> WorldConfig:
    d = dict(d)
    d["attributes"] = tuple(Attribute(**a) for a in d["attributes"])
    return WorldConfig(**d)


def encode_checkpoint(bundle: CheckpointBundle) -> bytes:
    state = bundle.state
    records = []
    for name, arr in state.params.arrays.items():
        records.append(_record(f"param/{name}", arr))
    for name, arr in state.opt.m.items():
        records.append(_record(f"adam_m/{name}", arr))
    for name, arr in state.opt.v.items():
        records.append(_record(f"adam_v/{name}", arr))
    blob = json.dumps(
        {
            "step": state.step,
            "adam_t": state.opt.t,
            "rng_latent": _rng_state(state.rng_latent),
            "rng_spec": _rng_state(state.rng_spec),
            "latent_digest": state.latent_digest,
            "spec_digest": state.spec_digest,
            "config": config_to_dict(bundle.config),
            "world_seed": bundle.world_seed,
            "world_config": world_config_to_dict(bundle.world_config),
        },
        sort_keys=True,
    ).encode()
    if len(bundle.manifest_digest) != 32:
        raise ValueError("manifest digest must be 32 bytes")
    body = MAGIC + struct.pack("<I", FORMAT_VERSION) + bundle.manifest_digest
    body += struct.pack("<I", len(records)) + b"".join(records)
    body += struct.pack("<Q", len(blob)) + blob
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise CheckpointTruncatedError(f"need {n} bytes at offset {self.pos}, file body ends at {self.end}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse(data: bytes, end: int):
    r = _Reader(data, end)
    r.take(8)
    digest = r.take(32)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        (rank,) = r.unpack("<I")
        if rank > 16:
            raise CheckpointTruncatedError(f"implausible rank {rank} for {name!r}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    (blob_len,) = r.unpack("<Q")
    blob = r.take(blob_len)
    if r.pos != end:
        raise CheckpointTruncatedError("trailing bytes before checksum")
    return digest, tensors, blob


def decode_checkpoint(data: bytes) -> CheckpointBundle:
    if len(data) < 8:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < 8 + 32 + 4 + 8 + 4:
        raise CheckpointTruncatedError(f"file is {len(data)} bytes")
    end = len(data) - 4
    (stored,) = struct.unpack("<I", data[end:])
    if zlib.crc32(data[:end]) != stored:
        # a structurally short file is reported as truncation, anything else as corruption
        try:
            _parse(data, end)
        except CheckpointTruncatedError:
            raise
        except Exception:
            pass
        raise CheckpointChecksumError("CRC-32 mismatch")
    digest, tensors, blob = _parse(data, end)
    meta = json.loads(blob.decode())

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    params = DyStyleParams(group("param/"))
    opt = AdamState(group("adam_m/"), group("adam_v/"), meta["adam_t"])
    state = TrainState(
        params=params,
        opt=opt,
        step=meta["step"],
        rng_latent=_restore_rng(meta["rng_latent"]),
        rng_spec=_restore_rng(meta["rng_spec"]),
        latent_digest=meta["latent_digest"],
        spec_digest=meta["spec_digest"],
    )
    return CheckpointBundle(
        state=state,
        config=config_from_dict(meta["config"]),
        world_seed=meta["world_seed"],
        world_config=world_config_from_dict(meta["world_config"]),
        manifest_digest=digest,
    )


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(bundle))
    tmp.replace(path)


def load_checkpoint(path) -> CheckpointBundle:
    return decode_checkpoint(Path(path).read_bytes())
