"""Training objective: attribute contrastor, identity, contrastive and normalization terms.

All functions take and return :class:`~dystyle.tensor.Tensor` values so they
can sit on a tape. Batched versions average per-sample losses over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .world import (
    AttributeSpec,
    FrozenWorld,
    identity_embed,
    predict_binary,
    predict_numeric,
)

PROB_EPS = 1e-12


class DegenerateEmbeddingError(ValueError):
    """Cosine similarity requested for a zero-norm embedding."""


@dataclass
class LossWeights:
    alpha_numeric: dict[str, float] = field(
        default_factory=lambda: {"yaw": 0.05, "pitch": 0.05, "age": 0.02}
    )
    alpha_binary: float = 1.0
    alpha_id: float = 1.0
    alpha_norm: float = 0.001
    alpha_dmac: float = 0.1
    thresholds: dict[str, float] = field(
        default_factory=lambda: {"yaw": 3.0, "pitch": 3.0, "age": 5.0}
    )

    def validate(self) -> None:
        values = [self.alpha_binary, self.alpha_id, self.alpha_norm, self.alpha_dmac]
        values += list(self.alpha_numeric.values()) + list(self.thresholds.values())
        if any(v < 0 for v in values):
            raise ValueError("loss weights and thresholds must be non-negative")


# ---------------------------------------------------------------- primitives


def cosine(a, b) -> Tensor:
    """Row-wise cosine similarity over the last axis."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    na, nb = T.l2norm(a), T.l2norm(b)
    if np.any(na.data == 0.0) or np.any(nb.data == 0.0):
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm embedding")
    return T.div(T.dot(a, b), T.mul(na, nb))


def numeric_attr_loss(a_m, a_u, delta_gt, threshold: float) -> Tensor:
    """``|a_m - a_u|`` when inactive (``delta_gt is None``), else the hinge
    ``max(|a_m - a_u - delta_gt| - threshold, 0)``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    diff = T.as_tensor(a_m) - T.as_tensor(a_u)
    if delta_gt is None:
        return T.abs_(diff)
    return T.maximum(T.abs_(diff - float(delta_gt)) - threshold, 0.0)


def numeric_attr_loss_batch(a_m: Tensor, a_u, deltas: np.ndarray, threshold: float) -> Tensor:
    """Per-sample numeric loss; ``deltas`` holds NaN where the attribute is inactive."""
    deltas = np.asarray(deltas, dtype=np.float64)
    active = ~np.isnan(deltas)
    diff = a_m - T.as_tensor(a_u)
    hinge = T.maximum(T.abs_(diff - Tensor(np.where(active, deltas, 0.0))) - threshold, 0.0)
    return T.where(active, hinge, T.abs_(diff))


def _cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    p = T.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    t = Tensor(targets)
    one = Tensor(np.ones(p.shape))
    return -(T.mul(t, T.log(p)) + T.mul(one - t, T.log(one - p)))


def binary_attr_loss(
    probs_m,
    emb_m,
    emb_u,
    gt: Mapping[str, int] | None,
    untouched_bits: Mapping[str, int],
    names: Sequence[str],
) -> Tensor:
    """Binary attribute loss of one sample.

    ``probs_m`` holds the manipulated probabilities in ``names`` order. When no
    requested bit differs from the untouched state the penultimate embeddings
    are pinned by ``1 - cos``; otherwise the cross-entropies of the flipped
    attributes are summed.
    """
    probs_m = T.as_tensor(probs_m)
    changed = np.array([gt is not None and k in gt and gt[k] != untouched_bits[k] for k in names])
    if not changed.any():
        return 1.0 - cosine(emb_m, emb_u)
    targets = np.array([float(gt[k]) if c else 0.0 for k, c in zip(names, changed)])
    ce = _cross_entropy(probs_m, targets)
    return T.sum_(T.mul(ce, Tensor(changed.astype(np.float64))))


def identity_loss(emb_m, emb_u) -> Tensor:
    """``1 - cos(emb_m, emb_u)``; mean over rows for batched input."""
    sim = cosine(emb_m, emb_u)
    loss = 1.0 - sim
    return T.mean(loss) if loss.ndim else loss


def _normalize(codes: Tensor) -> Tensor:
    norms = T.l2norm(codes)
    if np.any(norms.data == 0.0):
        raise DegenerateEmbeddingError("zero unified code")
    return T.div(codes, T.expand(T.reshape(norms, norms.shape + (1,)), codes.shape))


def dmac_auto_corr(codes_k) -> Tensor:
    """Mean dot product over ordered pairs of distinct batch rows.

    Rows are expected to be unit-normalized already.
    """
    codes_k = T.as_tensor(codes_k)
    n = codes_k.shape[0]
    if n < 2:
        raise ValueError("auto-correlation needs at least two samples")
    gram = T.matmul(codes_k, T.transpose(codes_k, (1, 0)))
    off_diag = 1.0 - np.eye(n)
    return T.scale(T.sum_(T.mul(gram, Tensor(off_diag))), 1.0 / (n * (n - 1)))


def dmac_cross_corr(codes: Mapping[str, Tensor], k: str, rows: Mapping[str, np.ndarray] | None = None) -> Tensor:
    """Mean of ``S^k . S^q`` over other attributes q and the samples they share with k.

    ``codes[name]`` has one (unit) row per sample where ``name`` is active;
    ``rows[name]`` gives those samples' batch indices (aligned if omitted).
    """
    rows = rows or {name: np.arange(c.shape[0]) for name, c in codes.items()}
    sk, rk = T.as_tensor(codes[k]), rows[k]
    dots = []
    for q, sq in codes.items():
        if q == k:
            continue
        rq = rows[q]
        shared, ik, iq = np.intersect1d(rk, rq, return_indices=True)
        if shared.size == 0:
            continue
        dots.append(T.dot(T.take(sk, ik, axis=0), T.take(T.as_tensor(sq), iq, axis=0)))
    if not dots:
        raise ValueError(f"cross-correlation of {k!r} needs another co-active attribute")
    return T.mean(T.concat(dots, axis=0))


def dmac_loss(codes: Mapping[str, Tensor], rows: Mapping[str, np.ndarray] | None = None) -> Tensor:
    """Contrastive loss over unified codes of the active attributes.

    Codes are L2-normalized here. Each attribute k with at least two samples
    and at least one co-active attribute contributes
    ``-log(exp(I_ac) / (exp(I_ac) + exp(I_cc)))``, evaluated as
    ``logsumexp([I_ac, I_cc]) - I_ac``. Returns 0 when no attribute qualifies.
    """
    codes = {k: T.as_tensor(v) for k, v in codes.items()}
    rows = rows or {name: np.arange(c.shape[0]) for name, c in codes.items()}
    if len(codes) < 2:
        return Tensor(0.0)
    unit = {k: _normalize(v) for k, v in codes.items()}
    terms = []
    for k in unit:
        if unit[k].shape[0] < 2:
            continue
        others = [q for q in unit if q != k and np.intersect1d(rows[k], rows[q]).size]
        if not others:
            continue
        ac = dmac_auto_corr(unit[k])
        cc = dmac_cross_corr(unit, k, rows)
        terms.append(T.logsumexp(T.stack([ac, cc], axis=0)) - ac)
    if not terms:
        return Tensor(0.0)
    return T.sum_(T.stack(terms, axis=0))


def norm_loss(w_hat, w_avg) -> Tensor:
    """Sum over layers of ``||w_hat_l - w_avg_l||``; batch-averaged for (B, L, D)."""
    w_hat = T.as_tensor(w_hat)
    w_avg = T.as_tensor(w_avg)
    if w_hat.shape[-2:] != w_avg.shape or w_avg.ndim != 2:
        raise T.ShapeError(f"norm_loss: shapes {w_hat.shape} and {w_avg.shape}")
    per_layer = T.l2norm(w_hat - T.expand(w_avg, w_hat.shape))
    if w_hat.ndim == 2:
        return T.sum_(per_layer)
    return T.mean(T.sum_(per_layer, axis=-1))


# ---------------------------------------------------------------- batch objective


@dataclass
class BatchPair:
    w: np.ndarray  # untouched codes (B, L, D)
    w_hat: Tensor  # manipulated codes (B, L, D)
    feature_u: Tensor  # (B, F)
    feature_m: Tensor  # (B, F)
    specs: Sequence[AttributeSpec]
    unified: dict[str, tuple[np.ndarray, Tensor]]

    def __post_init__(self):
        n = len(self.specs)
        if not (self.w.shape[0] == self.w_hat.shape[0] == self.feature_u.shape[0] == self.feature_m.shape[0] == n):
            raise ValueError("batch members disagree on batch length")


def loss_terms(batch: BatchPair, world: FrozenWorld, weights: LossWeights) -> dict[str, Tensor]:
    """Unweighted batch-mean loss terms keyed ``attr_<name>``, ``attr_bincos``, ``dmac``, ``id``, ``norm``."""
    cfg = world.config
    B = len(batch.specs)
    f_u, f_m = batch.feature_u, batch.feature_m
    terms: dict[str, Tensor] = {}

    for attr in cfg.numeric:
        a_m = predict_numeric(world, attr.name, f_m)
        a_u = predict_numeric(world, attr.name, f_u)
        deltas = np.array([s.numeric.get(attr.name, np.nan) for s in batch.specs])
        per = numeric_attr_loss_batch(a_m, a_u, deltas, weights.thresholds[attr.name])
        terms[f"attr_{attr.name}"] = T.mean(per)

    names = [a.name for a in cfg.binary]
    if names:
        probs_m, emb_m = predict_binary(world, f_m)
        probs_u, emb_u = predict_binary(world, f_u)
        untouched = probs_u.data > 0.5
        T.note_branch("untouched", np.sign(probs_u.data - 0.5))
        changed = np.zeros((B, len(names)), dtype=bool)
        targets = np.zeros((B, len(names)))
        for b, spec in enumerate(batch.specs):
            for j, name in enumerate(names):
                if name in spec.binary and bool(spec.binary[name]) != untouched[b, j]:
                    changed[b, j] = True
                    targets[b, j] = float(spec.binary[name])
        ce = T.mul(_cross_entropy(probs_m, targets), Tensor(changed.astype(np.float64)))
        for j, name in enumerate(names):
            terms[f"attr_{name}"] = T.scale(T.sum_(T.slice_(ce, 1, j, j + 1)), 1.0 / B)
        pinned = np.flatnonzero(~changed.any(axis=1))
        if pinned.size:
            cos = cosine(T.take(emb_m, pinned, axis=0), T.take(emb_u, pinned, axis=0))
            terms["attr_bincos"] = T.scale(T.sum_(1.0 - cos), 1.0 / B)
        else:
            terms["attr_bincos"] = Tensor(0.0)

    codes = {k: v for k, (_, v) in batch.unified.items()}
    rows = {k: r for k, (r, _) in batch.unified.items()}
    terms["dmac"] = dmac_loss(codes, rows)
    terms["id"] = identity_loss(identity_embed(world, f_m), identity_embed(world, f_u))
    terms["norm"] = norm_loss(batch.w_hat, world.w_avg)
    return terms


def term_weight(name: str, weights: LossWeights) -> float:
    if name.startswith("attr_"):
        attr = name[len("attr_"):]
        if attr in weights.alpha_numeric:
            return weights.alpha_numeric[attr]
        return weights.alpha_binary
    return {"dmac": weights.alpha_dmac, "id": weights.alpha_id, "norm": weights.alpha_norm}[name]


def total_loss(batch: BatchPair, weights: LossWeights, world: FrozenWorld) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective and its per-term breakdown (unweighted values plus ``total``)."""
    terms = loss_terms(batch, world, weights)
    parts = [T.scale(t, term_weight(name, weights)) for name, t in terms.items()]
    total = T.sum_(T.stack(parts, axis=0))
    breakdown = {name: t.item() for name, t in terms.items()}
    breakdown["total"] = total.item()
    return total, breakdown


def weighted_sum(breakdown: Mapping[str, float], weights: LossWeights) -> float:
    """Recompute the objective from a breakdown."""
    return float(sum(term_weight(k, weights) * v for k, v in breakdown.items() if k != "total"))
