"""Run configuration: a strict ``key = value`` file format with four sections.

Keys outside any section are looked up by name. Unknown, duplicate and
ill-typed keys are errors that carry the line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .losses import LossWeights
from .net import NetConfig
from .trainer import TrainConfig
from .world import WorldConfig

SECTIONS = ("train", "world", "loss", "eval")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _opt(section: str, default, doc: str):
    return field(default=default, metadata={"section": section, "doc": doc})


_W = WorldConfig()
_T = TrainConfig()
_L = LossWeights()


@dataclass
class RunConfig:
    # [train]
    stage1_steps: int = _opt("train", _T.stage1_steps, "single-attribute steps")
    stage2_steps: int = _opt("train", _T.stage2_steps, "multi-attribute steps")
    batch: int = _opt("train", _T.batch, "pairs per step")
    lr: float = _opt("train", _T.lr, "Adam learning rate")
    beta1: float = _opt("train", _T.beta1, "Adam first-moment decay")
    beta2: float = _opt("train", _T.beta2, "Adam second-moment decay")
    adam_eps: float = _opt("train", _T.adam_eps, "Adam denominator epsilon")
    seed: int = _opt("train", _T.seed, "training seed (init, latent and spec streams)")
    grad_clip: float = _opt("train", _T.grad_clip, "global gradient-norm clip, 0 disables")
    checkpoint_every: int = _opt("train", _T.checkpoint_every, "checkpoint cadence in steps, 0 disables")
    single_stage: bool = _opt("train", _T.single_stage, "sample attribute subsets from the first step")
    cross_attention: bool = _opt("train", _T.net.cross_attention, "join active experts with attention")
    static: bool = _opt("train", _T.net.static, "run every expert for every sample")
    unified_dim: int = _opt("train", _T.net.unified_dim, "width of the contrastive code")
    out_dir: str = _opt("train", "runs", "output directory")
    # [world]
    world_seed: int = _opt("world", 0, "seed of the frozen generator and probes")
    layers: int = _opt("world", _W.layers, "latent layers")
    dim: int = _opt("world", _W.dim, "latent width per layer")
    feature_dim: int = _opt("world", _W.feature_dim, "generator output width")
    generator_hidden: int = _opt("world", _W.generator_hidden, "generator hidden width")
    binary_hidden: int = _opt("world", _W.binary_hidden, "binary predictor hidden width")
    identity_dim: int = _opt("world", _W.identity_dim, "identity embedding width")
    feature_gain: float = _opt("world", _W.feature_gain, "pre-tanh activation std of the generator")
    binary_gain: float = _opt("world", _W.binary_gain, "binary logit slope per probe std")
    calibration_samples: int = _opt("world", _W.calibration_samples, "samples for scale and average-latent calibration")
    # [loss]
    alpha_yaw: float = _opt("loss", _L.alpha_numeric["yaw"], "yaw term weight")
    alpha_pitch: float = _opt("loss", _L.alpha_numeric["pitch"], "pitch term weight")
    alpha_age: float = _opt("loss", _L.alpha_numeric["age"], "age term weight")
    alpha_binary: float = _opt("loss", _L.alpha_binary, "binary terms weight")
    alpha_id: float = _opt("loss", _L.alpha_id, "identity term weight")
    alpha_norm: float = _opt("loss", _L.alpha_norm, "average-latent pull weight")
    alpha_dmac: float = _opt("loss", _L.alpha_dmac, "contrastive term weight")
    threshold_yaw: float = _opt("loss", _L.thresholds["yaw"], "yaw hinge tolerance")
    threshold_pitch: float = _opt("loss", _L.thresholds["pitch"], "pitch hinge tolerance")
    threshold_age: float = _opt("loss", _L.thresholds["age"], "age hinge tolerance")
    # [eval]
    eval_seed: int = _opt("eval", 1234, "held-out seed for the eval set")
    eval_size: int = _opt("eval", 500, "eval pairs")
    val_size: int = _opt("eval", 128, "validation pairs for loss curves")
    curve_every: int = _opt("eval", 500, "validation-curve cadence in steps")
    margin: float = _opt("eval", 0.0, "tolerance for ablation orderings")
    variants: str = _opt(
        "eval", "full,no_ca,no_dmac,no_ca_no_dmac,static_arch,single_stage,no_id_loss", "comma-separated ablation variants"
    )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            stage1_steps=self.stage1_steps,
            stage2_steps=self.stage2_steps,
            batch=self.batch,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            grad_clip=self.grad_clip,
            checkpoint_every=self.checkpoint_every,
            single_stage=self.single_stage,
            weights=LossWeights(
                alpha_numeric={"yaw": self.alpha_yaw, "pitch": self.alpha_pitch, "age": self.alpha_age},
                alpha_binary=self.alpha_binary,
                alpha_id=self.alpha_id,
                alpha_norm=self.alpha_norm,
                alpha_dmac=self.alpha_dmac,
                thresholds={"yaw": self.threshold_yaw, "pitch": self.threshold_pitch, "age": self.threshold_age},
            ),
            net=NetConfig(unified_dim=self.unified_dim, cross_attention=self.cross_attention, static=self.static),
        )

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            layers=self.layers,
            dim=self.dim,
            feature_dim=self.feature_dim,
            generator_hidden=self.generator_hidden,
            binary_hidden=self.binary_hidden,
            identity_dim=self.identity_dim,
            feature_gain=self.feature_gain,
            binary_gain=self.binary_gain,
            calibration_samples=self.calibration_samples,
        )

    def variant_list(self) -> list[str]:
        return [v.strip() for v in self.variants.split(",") if v.strip()]

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for f in fields(self):
                if f.metadata["section"] == section:
                    lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
            lines.append("")
        return "\n".join(lines)


FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(kind, raw: str, key: str, line: int):
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            value = int(raw, 10)
            if key.endswith("seed") and value < 0:
                raise ValueError(raw)
            return value
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key} expects {kind}, got {raw!r}", line, key) from None


def coerce(key: str, raw: str, line: int | None = None):
    """Parse ``raw`` as the type of field ``key``."""
    if key not in FIELDS:
        raise ConfigError(f"unknown key {key!r}", line, key)
    return _convert(FIELDS[key].type, raw, key, line)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    seen = {}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section {section!r}", lineno, section)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        home = FIELDS[key].metadata["section"]
        if section is not None and section != home:
            raise ConfigError(f"key {key!r} belongs in [{home}], not [{section}]", lineno, key)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, key)
        seen[key] = lineno
        values[key] = coerce(key, raw, lineno)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
