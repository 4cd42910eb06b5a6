"""Frozen synthetic generator world.

Stands in for a pretrained style generator plus its attribute, binary and
identity predictors. Everything here is fixed at build time; gradients pass
through the weights but never into them.

Layout of the feature space: an orthonormal basis of R^F is drawn once. The
first ``n_attributes`` basis vectors are the probe directions (numeric probes
first, then binary logit directions). Identity projections and the extra
binary-embedding units live in the span of the remaining basis vectors, so an
edit along one probe direction changes exactly one attribute and nothing the
identity embedder can see.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUMERIC = "numeric"
BINARY = "binary"

TRUNCATION = 0.7
RESAMPLE_CUTOFF = 3.0
LATENT_BOUND = TRUNCATION * RESAMPLE_CUTOFF


class CapacityError(ValueError):
    """More attributes requested than the feature space can keep orthogonal."""


class UnknownAttributeError(KeyError):
    pass


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str
    low: float = 0.0
    high: float = 1.0
    threshold: float = 0.0

    @property
    def half_range(self) -> float:
        return max(abs(self.low), abs(self.high))


DEFAULT_ATTRIBUTES = (
    Attribute("yaw", NUMERIC, -30.0, 30.0, 3.0),
    Attribute("pitch", NUMERIC, -30.0, 30.0, 3.0),
    Attribute("age", NUMERIC, -30.0, 30.0, 5.0),
    Attribute("glasses", BINARY),
    Attribute("smile", BINARY),
)


@dataclass(frozen=True)
class WorldConfig:
    layers: int = 6
    dim: int = 32
    feature_dim: int = 64
    generator_hidden: int = 256
    binary_hidden: int = 16
    identity_dim: int = 16
    # target std of the pre-tanh generator activations
    feature_gain: float = 0.3
    # binary logit slope, in units of the probe projection's std
    binary_gain: float = 3.0
    attributes: tuple[Attribute, ...] = DEFAULT_ATTRIBUTES
    calibration_samples: int = 10_000

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    @property
    def numeric(self) -> tuple[Attribute, ...]:
        return tuple(a for a in self.attributes if a.kind == NUMERIC)

    @property
    def binary(self) -> tuple[Attribute, ...]:
        return tuple(a for a in self.attributes if a.kind == BINARY)

    def attribute(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise UnknownAttributeError(name)


@dataclass(frozen=True)
class AttributeSpec:
    """Requested edit. Unset attributes are inactive.

    ``numeric`` holds relative deltas (e.g. ``{"yaw": 15.0}`` means +15),
    ``binary`` holds target bits.
    """

    numeric: dict[str, float] = field(default_factory=dict)
    binary: dict[str, int] = field(default_factory=dict)

    @classmethod
    def of(cls, config: WorldConfig, **values) -> "AttributeSpec":
        numeric, binary = {}, {}
        for name, value in values.items():
            if value is None:
                continue
            if config.attribute(name).kind == NUMERIC:
                numeric[name] = float(value)
            else:
                binary[name] = int(value)
        return cls(numeric, binary)

    def value(self, name: str):
        if name in self.numeric:
            return self.numeric[name]
        return self.binary.get(name)

    def active(self, config: WorldConfig) -> list[str]:
        """Active attribute names in the config's canonical order."""
        return [n for n in config.names if n in self.numeric or n in self.binary]

    def validate(self, config: WorldConfig) -> None:
        for name, value in self.numeric.items():
            attr = config.attribute(name)
            if attr.kind != NUMERIC:
                raise ValueError(f"{name} is binary, got a numeric value")
            if not attr.low <= value <= attr.high:
                raise ValueError(f"{name}={value} outside [{attr.low}, {attr.high}]")
        for name, value in self.binary.items():
            if config.attribute(name).kind != BINARY:
                raise ValueError(f"{name} is numeric, got a binary value")
            if value not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {value}")

    def __len__(self) -> int:
        return len(self.numeric) + len(self.binary)


@dataclass(frozen=True)
class FrozenWorld:
    config: WorldConfig
    seed: int
    gen_w1: np.ndarray  # (L*D, G)
    gen_w2: np.ndarray  # (G, F)
    directions: np.ndarray  # (n_attributes, F), orthonormal rows
    probes: np.ndarray  # (n_numeric, F), the numeric rows of ``directions``
    scales: np.ndarray  # (n_numeric,)
    bin_hidden: np.ndarray  # (F, h)
    bin_logits: np.ndarray  # (h, n_binary)
    bin_bias: np.ndarray  # (n_binary,)
    identity: np.ndarray  # (F, e)
    w_avg: np.ndarray  # (L, D)
    identity_overlap: float

    def numeric_index(self, name: str) -> int:
        for i, a in enumerate(self.config.numeric):
            if a.name == name:
                return i
        raise UnknownAttributeError(name)

    def binary_index(self, name: str) -> int:
        for i, a in enumerate(self.config.binary):
            if a.name == name:
                return i
        raise UnknownAttributeError(name)

    def binary_direction(self, name: str) -> np.ndarray:
        """Feature-space direction the logit of ``name`` is linear in."""
        return self.directions[len(self.config.numeric) + self.binary_index(name)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "gen_w1": self.gen_w1,
            "gen_w2": self.gen_w2,
            "directions": self.directions,
            "probes": self.probes,
            "scales": self.scales,
            "bin_hidden": self.bin_hidden,
            "bin_logits": self.bin_logits,
            "bin_bias": self.bin_bias,
            "identity": self.identity,
            "w_avg": self.w_avg,
        }

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def manifest(self) -> str:
        c = self.config
        lines = [
            f"seed={self.seed}",
            f"L={c.layers}",
            f"D={c.dim}",
            f"F={c.feature_dim}",
            f"G={c.generator_hidden}",
            f"h={c.binary_hidden}",
            f"e={c.identity_dim}",
        ]
        for a in c.attributes:
            if a.kind == NUMERIC:
                s = self.scales[self.numeric_index(a.name)]
                lines.append(
                    f"attr.{a.name}=numeric range={a.low!r},{a.high!r} threshold={a.threshold!r} scale={float(s)!r}"
                )
            else:
                lines.append(f"attr.{a.name}=binary")
        lines.append(f"identity_probe_overlap={self.identity_overlap!r}")
        lines.append(f"weights_sha256={self.weights_digest()}")
        return "\n".join(lines) + "\n"

    def manifest_digest(self) -> bytes:
        return hashlib.sha256(self.manifest().encode()).digest()


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def sample_latent(rng: np.random.Generator, batch: int, layers: int, dim: int) -> np.ndarray:
    """Truncated Gaussian W+ codes, shape (batch, layers, dim).

    Each coordinate is standard normal resampled until |z| <= 3, then scaled
    toward the (zero) mean by the truncation factor 0.7.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    z = rng.standard_normal((batch, layers, dim))
    bad = np.abs(z) > RESAMPLE_CUTOFF
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > RESAMPLE_CUTOFF
    return TRUNCATION * z


def world_build(seed: int, config: WorldConfig | None = None) -> FrozenWorld:
    config = config or WorldConfig()
    c = config
    n_attr = len(c.attributes)
    if min(c.layers, c.feature_dim, c.generator_hidden, c.binary_hidden, c.identity_dim) < 1 or c.dim < 2:
        raise ValueError("world dimensions must be positive (dim >= 2)")
    if n_attr > c.feature_dim // 2:
        raise CapacityError(
            f"{n_attr} attributes exceed orthogonalizable capacity F/2={c.feature_dim // 2}"
        )
    nb = len(c.binary)
    if 2 * nb > c.binary_hidden:
        raise CapacityError(f"binary_hidden={c.binary_hidden} too small for {nb} binary attributes")
    rng = np.random.default_rng(seed)

    basis, _ = np.linalg.qr(rng.standard_normal((c.feature_dim, c.feature_dim)))
    directions = basis[:, :n_attr].T
    complement = basis[:, n_attr:]
    n_num = len(c.numeric)
    probes = directions[:n_num]

    fan_in = c.layers * c.dim
    gen_w1 = rng.standard_normal((fan_in, c.generator_hidden)) * np.sqrt(2.0 / fan_in)
    gen_w2 = rng.standard_normal((c.generator_hidden, c.feature_dim))

    cal_rng = np.random.default_rng([seed, 1])
    lat = sample_latent(cal_rng, c.calibration_samples, c.layers, c.dim)
    hidden = np.maximum(lat.reshape(len(lat), -1) @ gen_w1, 0.0)
    pre = hidden @ gen_w2
    # keep the tanh mostly in its linear range
    gen_w2 *= c.feature_gain / pre.std()
    feats = np.tanh(hidden @ gen_w2)

    proj = feats @ probes.T
    scales = np.array([a.half_range for a in c.numeric]) / (2.0 * proj.std(axis=0))

    extra = c.binary_hidden - 2 * nb
    bin_cols = []
    for j in range(nb):
        u = directions[n_num + j]
        bin_cols += [u, -u]
    if extra:
        mix = complement @ rng.standard_normal((complement.shape[1], extra))
        mix /= np.linalg.norm(mix, axis=0, keepdims=True)
        bin_cols += list(mix.T)
    bin_hidden = np.stack(bin_cols, axis=1)
    bin_logits = np.zeros((c.binary_hidden, nb))
    bin_bias = np.zeros(nb)
    for j in range(nb):
        p = feats @ directions[n_num + j]
        gain = c.binary_gain / p.std()
        bin_logits[2 * j, j] = gain
        bin_logits[2 * j + 1, j] = -gain
        bin_bias[j] = -gain * np.median(p)

    identity = complement @ rng.standard_normal((complement.shape[1], c.identity_dim))
    identity /= np.sqrt(c.identity_dim)
    overlap = float(np.max(np.abs(directions @ identity)) / np.max(np.linalg.norm(identity, axis=0)))

    w_avg = sample_latent(np.random.default_rng([seed, 2]), c.calibration_samples, c.layers, c.dim).mean(axis=0)

    return FrozenWorld(
        config=config,
        seed=seed,
        gen_w1=_readonly(gen_w1),
        gen_w2=_readonly(gen_w2),
        directions=_readonly(directions),
        probes=_readonly(probes),
        scales=_readonly(scales),
        bin_hidden=_readonly(bin_hidden),
        bin_logits=_readonly(bin_logits),
        bin_bias=_readonly(bin_bias),
        identity=_readonly(identity),
        w_avg=_readonly(w_avg),
        identity_overlap=overlap,
    )


def generate(world: FrozenWorld, w) -> Tensor:
    """Feature of W+ code(s): ``tanh(relu(vec(w) M1) M2)``.

    Accepts one code (L, D) or a batch (B, L, D).
    """
    w = T.as_tensor(w)
    c = world.config
    if w.shape[-2:] != (c.layers, c.dim) or w.ndim not in (2, 3):
        raise T.ShapeError(f"generate: expected (..., {c.layers}, {c.dim}), got {w.shape}")
    single = w.ndim == 2
    flat = T.reshape(w, (1 if single else w.shape[0], c.layers * c.dim))
    hidden = T.relu(T.matmul(flat, Tensor(world.gen_w1)))
    feat = T.tanh(T.matmul(hidden, Tensor(world.gen_w2)))
    return T.reshape(feat, (c.feature_dim,)) if single else feat


def _check_feature(world, feature: Tensor, what: str):
    if feature.shape[-1] != world.config.feature_dim or feature.ndim not in (1, 2):
        raise T.ShapeError(f"{what}: expected feature (..., {world.config.feature_dim}), got {feature.shape}")


def predict_numeric(world: FrozenWorld, attr: str, feature) -> Tensor:
    """``scale_k * (u_k . feature)``; scalar for one feature, (B,) for a batch."""
    feature = T.as_tensor(feature)
    _check_feature(world, feature, "predict_numeric")
    k = world.numeric_index(attr)
    return T.scale(T.matmul(feature, Tensor(world.probes[k])), float(world.scales[k]))


def predict_binary(world: FrozenWorld, feature) -> tuple[Tensor, Tensor]:
    """Binary probabilities and the penultimate activation.

    Probability columns follow ``world.config.binary`` order.
    """
    feature = T.as_tensor(feature)
    _check_feature(world, feature, "predict_binary")
    penult = T.relu(T.matmul(feature, Tensor(world.bin_hidden)))
    logits = T.matmul(penult, Tensor(world.bin_logits))
    logits = T.broadcast_add(logits, Tensor(world.bin_bias))
    return T.sigmoid(logits), penult


def binary_probs(world: FrozenWorld, feature) -> dict[str, float]:
    probs, _ = predict_binary(world, feature)
    return {a.name: float(probs.data[..., i]) for i, a in enumerate(world.config.binary)}


def identity_embed(world: FrozenWorld, feature) -> Tensor:
    feature = T.as_tensor(feature)
    _check_feature(world, feature, "identity_embed")
    return T.matmul(feature, Tensor(world.identity))
