"""Control accuracy, identity preservation and the ablation harness.

Attribute and identity measurements here read the world's weights directly
with plain numpy. They deliberately do not reuse the tensor code behind the
training loss, so a bug there cannot hide itself in the metrics.
"""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .losses import loss_terms, BatchPair, term_weight
from .net import DyStyleParams, NetConfig, active_cost, forward
from .trainer import (
    CheckpointBundle,
    TrainConfig,
    run_two_stage,
    sample_attribute_config,
    with_overrides,
)
from .world import AttributeSpec, FrozenWorld, WorldConfig, generate, sample_latent

EVAL_STREAM = 21
VAL_STREAM = 22
BINARY_THRESHOLD = 0.5

Editor = Callable[[np.ndarray, Sequence[AttributeSpec]], np.ndarray]


class ManifestMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSet:
    latents: np.ndarray  # (N, L, D), read-only
    specs: tuple[AttributeSpec, ...]
    seed: int
    manifest_digest: bytes

    def __len__(self) -> int:
        return len(self.specs)

    def arity(self) -> np.ndarray:
        return np.array([len(s) for s in self.specs])


def build_evalset(world: FrozenWorld, seed: int = 1234, size: int = 500, stream: int = EVAL_STREAM) -> EvalSet:
    """Held-out (latent, spec) pairs: first half single edits, second half random subsets."""
    rng = np.random.default_rng([seed, stream])
    c = world.config
    latents = sample_latent(rng, size, c.layers, c.dim)
    n_single = size // 2
    specs = [sample_attribute_config(1 if i < n_single else 2, rng, c) for i in range(size)]
    latents.flags.writeable = False
    return EvalSet(latents, tuple(specs), seed, world.manifest_digest())


# ---------------------------------------------------------------- independent probes


def features(world: FrozenWorld, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w)
    hidden = np.maximum(w.reshape(len(w), -1) @ world.gen_w1, 0.0)
    return np.tanh(hidden @ world.gen_w2)


def measure_numeric(world: FrozenWorld, name: str, feats: np.ndarray) -> np.ndarray:
    k = world.numeric_index(name)
    return world.scales[k] * (feats @ world.probes[k])


def measure_binary(world: FrozenWorld, feats: np.ndarray) -> np.ndarray:
    penult = np.maximum(feats @ world.bin_hidden, 0.0)
    return 1.0 / (1.0 + np.exp(-(penult @ world.bin_logits + world.bin_bias)))


def identity_similarity(world: FrozenWorld, f_u: np.ndarray, f_m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity of identity embeddings plus a validity mask (False for zero norms)."""
    e_u, e_m = f_u @ world.identity, f_m @ world.identity
    n_u, n_m = np.linalg.norm(e_u, axis=-1), np.linalg.norm(e_m, axis=-1)
    valid = (n_u > 0) & (n_m > 0)
    sim = np.zeros(len(e_u))
    # identical vectors give exactly 1
    same = np.all(e_u == e_m, axis=-1) & valid
    rest = valid & ~same
    sim[same] = 1.0
    sim[rest] = np.sum(e_u[rest] * e_m[rest], axis=-1) / (n_u[rest] * n_m[rest])
    return sim, valid


# ---------------------------------------------------------------- editors


def network_editor(params: DyStyleParams, world: FrozenWorld, net: NetConfig, chunk: int = 250) -> Editor:
    def edit(w, specs):
        out = []
        for i in range(0, len(specs), chunk):
            res = forward(params, w[i : i + chunk], specs[i : i + chunk], world.config, net)
            out.append(features(world, res.w_hat.data))
        return np.concatenate(out, axis=0)

    return edit


def oracle_editor(world: FrozenWorld, logit_margin: float = 4.0) -> Editor:
    """Edits features directly along the probe directions (test fixture only)."""

    def edit(w, specs):
        f_u = features(world, w)
        f_m = f_u.copy()
        probs = measure_binary(world, f_u)
        for i, spec in enumerate(specs):
            for name, delta in spec.numeric.items():
                k = world.numeric_index(name)
                f_m[i] += (delta / world.scales[k]) * world.probes[k]
            for name, bit in spec.binary.items():
                j = world.binary_index(name)
                if (probs[i, j] > BINARY_THRESHOLD) == bool(bit):
                    continue
                u = world.binary_direction(name)
                gain = world.bin_logits[2 * j, j]
                target = ((logit_margin if bit else -logit_margin) - world.bin_bias[j]) / gain
                f_m[i] += (target - f_u[i] @ u) * u
        return f_m

    return edit


def _resolve(editor, world: FrozenWorld, evalset: EvalSet, net: NetConfig | None):
    if isinstance(editor, CheckpointBundle):
        if editor.manifest_digest != evalset.manifest_digest:
            raise ManifestMismatchError("checkpoint and eval set come from different worlds")
        editor = network_editor(editor.params, world, editor.config.net)
    elif isinstance(editor, DyStyleParams):
        editor = network_editor(editor, world, net or NetConfig())
    if evalset.manifest_digest != world.manifest_digest():
        raise ManifestMismatchError("eval set was built on a different world")
    return editor


def _groups(evalset: EvalSet) -> dict[str, np.ndarray]:
    arity = evalset.arity()
    return {"single": arity == 1, "multi": arity >= 2, "all": arity >= 0}


@dataclass
class EvalRow:
    group: str
    attribute: str
    metric: str
    value: float
    count: int


def eval_control_accuracy(editor, evalset: EvalSet, world: FrozenWorld, net: NetConfig | None = None) -> list[EvalRow]:
    """Numeric MAE of measured vs. requested delta, binary accuracy against the target bit.

    Rows are split into single-edit, multi-edit and all pairs.
    """
    edit = _resolve(editor, world, evalset, net)
    w, specs = evalset.latents, list(evalset.specs)
    f_u = features(world, w)
    f_m = edit(w, specs)
    probs_m = measure_binary(world, f_m)
    rows = []
    for group, in_group in _groups(evalset).items():
        for attr in world.config.numeric:
            idx = [i for i in np.flatnonzero(in_group) if attr.name in specs[i].numeric]
            if not idx:
                continue
            measured = measure_numeric(world, attr.name, f_m[idx]) - measure_numeric(world, attr.name, f_u[idx])
            target = np.array([specs[i].numeric[attr.name] for i in idx])
            rows.append(EvalRow(group, attr.name, "mae", float(np.mean(np.abs(measured - target))), len(idx)))
        for j, attr in enumerate(world.config.binary):
            idx = [i for i in np.flatnonzero(in_group) if attr.name in specs[i].binary]
            if not idx:
                continue
            pred = probs_m[idx, j] > BINARY_THRESHOLD
            target = np.array([bool(specs[i].binary[attr.name]) for i in idx])
            rows.append(EvalRow(group, attr.name, "accuracy", float(np.mean(pred == target)), len(idx)))
    return rows


@dataclass
class IdentityReport:
    mean: dict[str, float]
    std: dict[str, float]
    count: dict[str, int]
    excluded: int


def eval_identity(editor, evalset: EvalSet, world: FrozenWorld, net: NetConfig | None = None) -> IdentityReport:
    edit = _resolve(editor, world, evalset, net)
    w, specs = evalset.latents, list(evalset.specs)
    sim, valid = identity_similarity(world, features(world, w), edit(w, specs))
    report = IdentityReport({}, {}, {}, int(np.sum(~valid)))
    for group, in_group in _groups(evalset).items():
        keep = in_group & valid
        if not keep.any():
            continue
        report.mean[group] = float(np.mean(sim[keep]))
        report.std[group] = float(np.std(sim[keep]))
        report.count[group] = int(keep.sum())
    return report


def lookup(rows: Sequence[EvalRow], group: str, attribute: str) -> float:
    for r in rows:
        if r.group == group and r.attribute == attribute:
            return r.value
    raise KeyError((group, attribute))


def write_rows(rows: Sequence[dict], path) -> None:
    rows = list(rows)
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def control_table_rows(rows: Sequence[EvalRow], identity: IdentityReport) -> list[dict]:
    out = [vars(r).copy() for r in rows]
    for group, mean in identity.mean.items():
        out.append({"group": group, "attribute": "identity", "metric": "cosine_mean", "value": mean, "count": identity.count[group]})
        out.append({"group": group, "attribute": "identity", "metric": "cosine_std", "value": identity.std[group], "count": identity.count[group]})
    return out


# ---------------------------------------------------------------- validation loss


def validation_losses(params: DyStyleParams, world: FrozenWorld, valset: EvalSet, config: TrainConfig, reference: TrainConfig) -> dict[str, float]:
    """Unweighted ``id`` and ``attr_*`` terms on a fixed set, plus the reference-weighted ``attr`` sum."""
    w = np.asarray(valset.latents)
    specs = list(valset.specs)
    res = forward(params, w, specs, world.config, config.net)
    batch = BatchPair(w, res.w_hat, generate(world, w), generate(world, res.w_hat), specs, res.unified)
    terms = {k: v.item() for k, v in loss_terms(batch, world, reference.weights).items()}
    out = {k: v for k, v in terms.items() if k.startswith("attr_") or k == "id"}
    out["attr"] = sum(term_weight(k, reference.weights) * v for k, v in terms.items() if k.startswith("attr_"))
    out["id_plus_attr"] = out["id"] + out["attr"]
    return out


# ---------------------------------------------------------------- ablations

VARIANTS: dict[str, dict] = {
    "full": {},
    "no_ca": {"cross_attention": False},
    "no_dmac": {"alpha_dmac": 0.0},
    "no_ca_no_dmac": {"cross_attention": False, "alpha_dmac": 0.0},
    "static_arch": {"static": True},
    "single_stage": {"single_stage": True},
    "no_id_loss": {"alpha_id": 0.0},
}


def variant_config(tag: str, base: TrainConfig) -> TrainConfig:
    try:
        deltas = VARIANTS[tag]
    except KeyError:
        raise ValueError(f"unknown ablation variant {tag!r}; known: {sorted(VARIANTS)}") from None
    return with_overrides(base, **deltas)


@dataclass
class VariantResult:
    tag: str
    summary: dict
    curve: list[dict]
    latent_digest: str
    spec_digest: str
    bundle: CheckpointBundle | None = None


@dataclass
class AblationResult:
    variants: dict[str, VariantResult] = field(default_factory=dict)

    def table(self) -> list[dict]:
        return [{"variant": tag, **v.summary} for tag, v in self.variants.items()]

    def curves(self) -> list[dict]:
        return [{"variant": tag, **row} for tag, v in self.variants.items() for row in v.curve]


def summarize(params: DyStyleParams, net: NetConfig, world: FrozenWorld, evalset: EvalSet) -> dict:
    rows = eval_control_accuracy(params, evalset, world, net)
    ident = eval_identity(params, evalset, world, net)
    out = {f"{r.group}_{r.attribute}_{r.metric}": r.value for r in rows}
    out.update({f"{g}_identity": m for g, m in ident.mean.items()})
    return out


def run_ablation(
    variants: Sequence[str],
    base: TrainConfig,
    world: FrozenWorld,
    evalset: EvalSet | None = None,
    valset: EvalSet | None = None,
    curve_every: int = 500,
    out_dir: Path | None = None,
    keep_bundles: bool = False,
) -> AblationResult:
    """Train every variant from the same seed and budget, then evaluate.

    Validation losses (``id``, ``attr_*``, weighted ``attr``) are recorded every
    ``curve_every`` steps and at the end, always weighted by ``base``'s loss
    weights so variants are comparable.
    """
    evalset = evalset or build_evalset(world)
    valset = valset or build_evalset(world, evalset.seed, size=128, stream=VAL_STREAM)
    result = AblationResult()
    for tag in variants:
        config = variant_config(tag, base)
        curve = []

        def record(state, row, config=config, curve=curve):
            if state.step % curve_every == 0 or state.step == config.total_steps:
                losses = validation_losses(state.params, world, valset, config, base)
                curve.append({"step": state.step, **losses})

        start = time.perf_counter()
        bundle = run_two_stage(config, world, out_dir=None if out_dir is None else Path(out_dir) / tag, on_step=record)
        summary = summarize(bundle.params, config.net, world, evalset)
        final = curve[-1] if curve else validation_losses(bundle.params, world, valset, config, base)
        summary.update({f"val_{k}": v for k, v in final.items()})
        summary["train_seconds"] = time.perf_counter() - start
        result.variants[tag] = VariantResult(
            tag, summary, curve, bundle.state.latent_digest, bundle.state.spec_digest, bundle if keep_bundles else None
        )
    return result


def cost_report(wcfg: WorldConfig, net: NetConfig | None = None) -> list[dict]:
    """Forward cost of every activation mask against the all-experts baseline."""
    net = net or NetConfig()
    static = active_cost(list(wcfg.names), wcfg, net)
    rows = []
    for k in range(len(wcfg.names) + 1):
        for subset in itertools.combinations(wcfg.names, k):
            cost = active_cost(list(subset), wcfg, net)
            rows.append(
                {
                    "mask": "+".join(subset) or "-",
                    "active": k,
                    "cost": cost,
                    "static_cost": static,
                    "ratio": cost / static,
                }
            )
    return rows
