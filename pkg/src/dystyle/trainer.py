"""Two-stage training: single-attribute edits first, then random attribute subsets.

The loss is the same object in both stages; only the spec sampler changes.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .losses import BatchPair, LossWeights, total_loss
from .net import DyStyleParams, NetConfig, forward
from .tensor import Tape
from .world import BINARY, AttributeSpec, FrozenWorld, WorldConfig, generate, sample_latent

log = logging.getLogger(__name__)

# substream ids under the run seed
LATENT_STREAM = 11
SPEC_STREAM = 12
INIT_STREAM = 13


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 4000
    batch: int = 8
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    grad_clip: float = 10.0
    checkpoint_every: int = 1000
    # multi-attribute sampling from the first step
    single_stage: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)

    def validate(self) -> None:
        if self.stage1_steps < 0 or self.stage2_steps < 0 or self.batch < 1:
            raise ValueError("step counts must be non-negative and batch positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.weights.validate()

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def stage_at(self, step: int) -> int:
        if self.single_stage or step >= self.stage1_steps:
            return 2
        return 1


# ---------------------------------------------------------------- sampling


def _sample_value(attr, rng: np.random.Generator):
    if attr.kind == BINARY:
        return int(rng.integers(2))
    return float(rng.uniform(attr.low, attr.high))


def sample_attribute_config(stage: int, rng: np.random.Generator, wcfg: WorldConfig) -> AttributeSpec:
    """Stage 1: one attribute, uniformly. Stage 2: a uniform non-empty subset.

    Values are drawn uniformly from each chosen attribute's range.
    """
    attrs = wcfg.attributes
    if stage == 1:
        chosen = [attrs[int(rng.integers(len(attrs)))]]
    elif stage == 2:
        mask = int(rng.integers(1, 2 ** len(attrs)))
        chosen = [a for i, a in enumerate(attrs) if mask >> i & 1]
    else:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    return AttributeSpec.of(wcfg, **{a.name: _sample_value(a, rng) for a in chosen})


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: DyStyleParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
        )


def adam_update(params: DyStyleParams, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam step, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.arrays.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------- state


def _chain(digest: str, payload: bytes) -> str:
    return hashlib.sha256(digest.encode() + payload).hexdigest()


def spec_bytes(specs: Sequence[AttributeSpec]) -> bytes:
    return repr([(sorted(s.numeric.items()), sorted(s.binary.items())) for s in specs]).encode()


@dataclass
class TrainState:
    params: DyStyleParams
    opt: AdamState
    step: int
    rng_latent: np.random.Generator
    rng_spec: np.random.Generator
    latent_digest: str = ""
    spec_digest: str = ""

    @classmethod
    def fresh(cls, world: FrozenWorld, config: TrainConfig) -> "TrainState":
        seed = config.seed
        params = DyStyleParams.init(world.config, config.net, np.random.default_rng([seed, INIT_STREAM]))
        return cls(
            params=params,
            opt=AdamState.zeros_like(params),
            step=0,
            rng_latent=np.random.default_rng([seed, LATENT_STREAM]),
            rng_spec=np.random.default_rng([seed, SPEC_STREAM]),
        )


METRIC_TERMS_FIXED = ("attr_bincos", "dmac", "id", "norm")


def metric_columns(wcfg: WorldConfig) -> list[str]:
    attrs = [f"attr_{a.name}" for a in wcfg.attributes]
    extra = list(METRIC_TERMS_FIXED) if wcfg.binary else [t for t in METRIC_TERMS_FIXED if t != "attr_bincos"]
    return ["step", "stage", "n_active", "total"] + attrs + extra + ["grad_norm"]


def batch_loss(params, w: np.ndarray, specs, world: FrozenWorld, config: TrainConfig):
    """Forward both paths and evaluate the objective; ``params`` may be tape-bound."""
    res = forward(params, w, specs, world.config, config.net)
    if not np.all(np.isfinite(res.w_hat.data)):
        raise NonFiniteError("non-finite edited latent")
    batch = BatchPair(
        w=w,
        w_hat=res.w_hat,
        feature_u=generate(world, w),
        feature_m=generate(world, res.w_hat),
        specs=specs,
        unified=res.unified,
    )
    return total_loss(batch, config.weights, world)


def compute_gradients(params: DyStyleParams, w: np.ndarray, specs, world: FrozenWorld, config: TrainConfig):
    """Gradient of the objective w.r.t. every parameter array, plus the loss breakdown."""
    tape = Tape()
    bound = params.bind(tape)
    total, breakdown = batch_loss(bound, w, specs, world, config)
    if not np.isfinite(total.item()):
        raise NonFiniteError(f"non-finite loss: {breakdown}")
    if total.tape is not tape:
        # nothing on the tape reaches the loss (e.g. an all-empty batch)
        return {name: np.zeros_like(a) for name, a in params.arrays.items()}, breakdown
    node_grads = tape.backward(total)
    return {name: node_grads[t.node] for name, t in bound.items()}, breakdown


def train_step(
    state: TrainState,
    world: FrozenWorld,
    config: TrainConfig,
    specs: Sequence[AttributeSpec] | None = None,
) -> dict:
    """Sample a batch, backprop the objective, update the network.

    ``specs`` overrides the sampler (latents are still drawn from the stream).
    """
    wcfg = world.config
    stage = config.stage_at(state.step)
    w = sample_latent(state.rng_latent, config.batch, wcfg.layers, wcfg.dim)
    if specs is None:
        specs = [sample_attribute_config(stage, state.rng_spec, wcfg) for _ in range(config.batch)]
    state.latent_digest = _chain(state.latent_digest, w.tobytes())
    state.spec_digest = _chain(state.spec_digest, spec_bytes(specs))

    grads, breakdown = compute_gradients(state.params, w, specs, world, config)
    grad_norm = clip_global_norm(grads, config.grad_clip)
    adam_update(state.params, grads, state.opt, config)

    row = {"step": state.step, "stage": stage, "n_active": float(np.mean([len(s) for s in specs]))}
    row.update(breakdown)
    row["grad_norm"] = grad_norm
    state.step += 1
    return row


def write_metrics(rows: Sequence[dict], path: Path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns})


@dataclass
class CheckpointBundle:
    state: TrainState
    config: TrainConfig
    world_seed: int
    world_config: WorldConfig
    manifest_digest: bytes
    metrics: list[dict] = field(default_factory=list)

    @property
    def params(self) -> DyStyleParams:
        return self.state.params


def run_two_stage(
    config: TrainConfig,
    world: FrozenWorld,
    out_dir: Path | None = None,
    state: TrainState | None = None,
    until: int | None = None,
    on_step: Callable[[TrainState, dict], None] | None = None,
) -> CheckpointBundle:
    """Train stage 1 then stage 2 (or resume ``state``) up to ``until`` steps.

    With ``out_dir``, writes ``metrics.csv``, checkpoints every
    ``checkpoint_every`` steps, one at the stage boundary and a final one.
    """
    from .checkpoint import save_checkpoint

    config.validate()
    state = state or TrainState.fresh(world, config)
    bundle = CheckpointBundle(state, config, world.seed, world.config, world.manifest_digest())
    end = config.total_steps if until is None else min(until, config.total_steps)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    while state.step < end:
        row = train_step(state, world, config)
        bundle.metrics.append(row)
        if on_step is not None:
            on_step(state, row)
        if out_dir is not None:
            boundary = state.step == config.stage1_steps and not config.single_stage
            cadence = config.checkpoint_every > 0 and state.step % config.checkpoint_every == 0
            if boundary:
                save_checkpoint(bundle, out_dir / "stage1.dys")
            if cadence:
                save_checkpoint(bundle, out_dir / f"step{state.step:06d}.dys")
        if state.step % 500 == 0:
            log.info("step %d total %.4f (%.1fs)", state.step, row["total"], time.perf_counter() - start)
    if out_dir is not None:
        save_checkpoint(bundle, out_dir / "final.dys")
        write_metrics(bundle.metrics, out_dir / "metrics.csv", metric_columns(world.config))
    return bundle


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    net_keys = {"cross_attention", "static", "unified_dim"}
    net_changes = {k: changes.pop(k) for k in list(changes) if k in net_keys}
    weight_changes = {k: changes.pop(k) for k in list(changes) if k.startswith("alpha_")}
    out = replace(config, **changes)
    if net_changes:
        out = replace(out, net=replace(out.net, **net_changes))
    if weight_changes:
        out = replace(out, weights=replace(out.weights, **weight_changes))
    return out
