"""The dynamic multi-expert latent manipulation network.

One expert per attribute and layer turns ``(w_l, value)`` into a proxy code.
Only experts of attributes named in the spec run. Proxies of one sample are
mixed by cross-attention (shared Q/K/V per layer), summed, and the sum drives
a linear modulation ``(1 + gamma) * w_l + beta`` of the layer code. Each
active attribute's layer-averaged proxy is also mapped into a shared unified
space for the contrastive loss.

The batch path groups samples by attribute: each expert runs once on the rows
that use it, and a key/query mask confines attention to a sample's own
attributes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor
from .world import BINARY, AttributeSpec, UnknownAttributeError, WorldConfig


@dataclass(frozen=True)
class NetConfig:
    unified_dim: int = 16
    cross_attention: bool = True
    # all experts run for every sample (inactive ones get a neutral value)
    static: bool = False


class DyStyleParams:
    """Named float64 arrays; key order is fixed by construction."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    @classmethod
    def init(cls, wcfg: WorldConfig, ncfg: NetConfig, rng: np.random.Generator) -> "DyStyleParams":
        L, D, Du = wcfg.layers, wcfg.dim, ncfg.unified_dim

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, shape)

        arrays = {}
        for name in wcfg.names:
            arrays[f"expert.{name}.w1"] = uniform((L, D + 1, 2 * D), D + 1)
            arrays[f"expert.{name}.b1"] = uniform((L, 1, 2 * D), D + 1)
            arrays[f"expert.{name}.w2"] = uniform((L, 2 * D, D), 2 * D)
            arrays[f"expert.{name}.b2"] = uniform((L, 1, D), 2 * D)
        for proj in ("q", "k", "v"):
            arrays[f"attn.w{proj}"] = uniform((L, D, D), D)
            arrays[f"attn.b{proj}"] = uniform((L, 1, D), D)
        # zero head: an untrained network is the identity edit
        arrays["mod.w"] = np.zeros((L, D, 2 * D))
        arrays["mod.b"] = np.zeros((L, 1, 2 * D))
        arrays["enc.w1"] = uniform((D, D), D)
        arrays["enc.b1"] = uniform((D,), D)
        arrays["enc.w2"] = uniform((D, Du), D)
        arrays["enc.b2"] = uniform((Du,), D)
        return cls(arrays)

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.leaf(v, k) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}

    def copy(self) -> "DyStyleParams":
        return DyStyleParams({k: v.copy() for k, v in self.arrays.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def __eq__(self, other):
        if not isinstance(other, DyStyleParams) or self.arrays.keys() != other.arrays.keys():
            return False
        return all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())


def expected_param_count(wcfg: WorldConfig, ncfg: NetConfig) -> int:
    L, D, Du, K = wcfg.layers, wcfg.dim, ncfg.unified_dim, len(wcfg.attributes)
    expert = L * ((D + 1) * 2 * D + 2 * D + 2 * D * D + D)
    attn = 3 * L * (D * D + D)
    mod = L * (D * 2 * D + 2 * D)
    enc = D * D + D + D * Du + Du
    return K * expert + attn + mod + enc


@dataclass
class ForwardResult:
    w_hat: Tensor  # (B, L, D)
    # attribute -> (batch rows where it is active, unified codes (n, D_u))
    unified: dict[str, tuple[np.ndarray, Tensor]]


def _as_tensors(params) -> Mapping[str, Tensor]:
    if isinstance(params, DyStyleParams):
        return params.constants()
    return params


def encode_value(wcfg: WorldConfig, name: str, value) -> float:
    """Expert input for an attribute value; numeric deltas are scaled to [-1, 1]."""
    attr = wcfg.attribute(name)
    if attr.kind == BINARY:
        return float(value)
    return float(value) / attr.half_range


def _neutral(wcfg: WorldConfig, name: str) -> float:
    return 0.5 if wcfg.attribute(name).kind == BINARY else 0.0


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.broadcast_add(T.matmul(x, w), b)


def _layer(p: Tensor, layer: int) -> Tensor:
    return T.reshape(T.take(p, [layer], axis=0), p.shape[1:])


def _masks(specs: Sequence[AttributeSpec], wcfg: WorldConfig, ncfg: NetConfig):
    names = wcfg.names
    B, K = len(specs), len(names)
    active = np.zeros((B, K), dtype=bool)
    values = np.zeros((B, K))
    for b, spec in enumerate(specs):
        for name in spec.numeric:
            if name not in names:
                raise UnknownAttributeError(name)
        for name in spec.binary:
            if name not in names:
                raise UnknownAttributeError(name)
        for i, name in enumerate(names):
            v = spec.value(name)
            if v is not None:
                active[b, i] = True
                values[b, i] = encode_value(wcfg, name, v)
            elif ncfg.static:
                values[b, i] = _neutral(wcfg, name)
    run = np.ones_like(active) if ncfg.static else active
    return active, run, values


def forward(params, w, specs: Sequence[AttributeSpec], wcfg: WorldConfig, ncfg: NetConfig) -> ForwardResult:
    """Batched manipulation of W+ codes ``w`` (B, L, D), one spec per row."""
    p = _as_tensors(params)
    w = T.as_tensor(w)
    L, D = wcfg.layers, wcfg.dim
    if w.ndim != 3 or w.shape[1:] != (L, D) or w.shape[0] != len(specs):
        raise T.ShapeError(f"forward: expected ({len(specs)}, {L}, {D}) codes, got {w.shape}")
    B, K = len(specs), len(wcfg.names)
    active, run, values = _masks(specs, wcfg, ncfg)
    if not run.any():
        return ForwardResult(w, {})

    wl = T.transpose(w, (1, 0, 2))  # (L, B, D)
    slots, proxies = [], {}
    for i, name in enumerate(wcfg.names):
        rows = np.flatnonzero(run[:, i])
        if rows.size == 0:
            slots.append(Tensor(np.zeros((L, B, D))))
            continue
        x = T.take(wl, rows, axis=1)
        v = Tensor(np.broadcast_to(values[rows, i][None, :, None], (L, rows.size, 1)))
        h = T.relu(_dense(T.concat([x, v], axis=-1), p[f"expert.{name}.w1"], p[f"expert.{name}.b1"]))
        proxy = _dense(h, p[f"expert.{name}.w2"], p[f"expert.{name}.b2"])  # (L, n, D)
        proxies[name] = (rows, proxy)
        slots.append(T.scatter(proxy, rows, axis=1, size=B))

    padded = T.reshape(T.stack(slots, axis=2), (L, B * K, D))
    values_t = T.reshape(_dense(padded, p["attn.wv"], p["attn.bv"]), (L, B, K, D))
    if ncfg.cross_attention:
        q = T.reshape(_dense(padded, p["attn.wq"], p["attn.bq"]), (L, B, K, D))
        k = T.reshape(_dense(padded, p["attn.wk"], p["attn.bk"]), (L, B, K, D))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))  # (L, B, K, K)
        key_mask = np.broadcast_to(run[None, :, None, :], scores.shape)
        joined = T.matmul(T.softmax(scores, mask=key_mask), values_t)
    else:
        joined = values_t
    query_mask = np.broadcast_to(run[None, :, :, None], joined.shape).astype(np.float64)
    fused = T.sum_(T.mul(joined, Tensor(query_mask)), axis=2)  # (L, B, D)

    edited = _modulate(wl, fused, p["mod.w"], p["mod.b"], D)
    row_mask = np.broadcast_to(run.any(axis=1)[None, :, None], edited.shape)
    w_hat = T.transpose(T.where(row_mask, edited, wl), (1, 0, 2))

    unified = {}
    for i, name in enumerate(wcfg.names):
        if name not in proxies:
            continue
        rows, proxy = proxies[name]
        keep = active[rows, i]
        if not keep.any():
            continue
        if not keep.all():
            proxy = T.take(proxy, np.flatnonzero(keep), axis=1)
        unified[name] = (rows[keep], _encode(p, T.mean(proxy, axis=0)))
    return ForwardResult(w_hat, unified)


def _modulate(w_l: Tensor, fused: Tensor, head_w: Tensor, head_b: Tensor, D: int) -> Tensor:
    mod = _dense(fused, head_w, head_b)
    gamma = T.slice_(mod, -1, 0, D)
    beta = T.slice_(mod, -1, D, 2 * D)
    return w_l + gamma * w_l + beta


def _encode(p: Mapping[str, Tensor], x: Tensor) -> Tensor:
    h = T.relu(_dense(x, p["enc.w1"], p["enc.b1"]))
    return _dense(h, p["enc.w2"], p["enc.b2"])


# ---------------------------------------------------------------- single-sample surface


def expert_forward(params, wcfg: WorldConfig, attr: str, layer: int, w_l, value) -> Tensor:
    """Proxy code (D,) of one expert at one layer."""
    p = _as_tensors(params)
    if attr not in wcfg.names:
        raise UnknownAttributeError(attr)
    w_l = T.as_tensor(w_l)
    x = T.concat([w_l, Tensor([encode_value(wcfg, attr, value)])], axis=0)
    w1 = _layer(p[f"expert.{attr}.w1"], layer)
    b1 = T.reshape(_layer(p[f"expert.{attr}.b1"], layer), (2 * wcfg.dim,))
    w2 = _layer(p[f"expert.{attr}.w2"], layer)
    b2 = T.reshape(_layer(p[f"expert.{attr}.b2"], layer), (wcfg.dim,))
    h = T.relu(T.matmul(x, w1) + b1)
    return T.matmul(h, w2) + b2


def cross_attention_join(proxies: Sequence, params, layer: int) -> list[Tensor]:
    """Mix the proxies of one sample at one layer.

    ``out_i = sum_j softmax_j(q_i . k_j) * v_j`` with q, k, v affine images of
    each proxy under projections shared by all attributes.
    """
    if len(proxies) == 0:
        raise ValueError("cross_attention_join needs at least one proxy")
    p = _as_tensors(params)
    x = T.stack([T.as_tensor(t) for t in proxies], axis=0)  # (n, D)
    n, D = x.shape

    def proj(name):
        w = _layer(p[f"attn.w{name}"], layer)
        b = T.reshape(_layer(p[f"attn.b{name}"], layer), (1, D))
        return T.broadcast_add(T.matmul(x, w), b)

    q, k, v = proj("q"), proj("k"), proj("v")
    weights = T.softmax(T.matmul(q, T.transpose(k, (1, 0))))
    out = T.matmul(weights, v)
    return [T.reshape(T.slice_(out, 0, i, i + 1), (D,)) for i in range(n)]


def value_projection(proxy, params, layer: int) -> Tensor:
    p = _as_tensors(params)
    proxy = T.as_tensor(proxy)
    D = proxy.shape[0]
    w = _layer(p["attn.wv"], layer)
    b = T.reshape(_layer(p["attn.bv"], layer), (D,))
    return T.matmul(proxy, w) + b


def modulate(w_l, fused_sum, params, layer: int) -> Tensor:
    """``(1 + gamma) * w_l + beta`` with (gamma, beta) from the layer's head."""
    p = _as_tensors(params)
    w_l, fused_sum = T.as_tensor(w_l), T.as_tensor(fused_sum)
    if w_l.shape != fused_sum.shape or w_l.ndim != 1:
        raise T.ShapeError(f"modulate: shapes {w_l.shape} and {fused_sum.shape}")
    D = w_l.shape[0]
    head_w = _layer(p["mod.w"], layer)
    head_b = T.reshape(_layer(p["mod.b"], layer), (2 * D,))
    mod = T.matmul(fused_sum, head_w) + head_b
    gamma = T.slice_(mod, 0, 0, D)
    beta = T.slice_(mod, 0, D, 2 * D)
    return w_l + gamma * w_l + beta


def dystyle_forward(params, w, spec: AttributeSpec, wcfg: WorldConfig, ncfg: NetConfig | None = None):
    """Edit one W+ code (L, D). Returns ``(w_hat, {attr: unified code})``."""
    ncfg = ncfg or NetConfig()
    w = T.as_tensor(w)
    res = forward(params, T.reshape(w, (1,) + w.shape), [spec], wcfg, ncfg)
    w_hat = T.reshape(res.w_hat, w.shape)
    unified = {name: T.reshape(code, (ncfg.unified_dim,)) for name, (_, code) in res.unified.items()}
    return w_hat, unified


def active_cost(spec: AttributeSpec | Sequence[str], wcfg: WorldConfig, ncfg: NetConfig | None = None) -> int:
    """Multiply-add count of one forward pass under the spec's activation mask.

    Counts matmul multiply-adds of experts, Q/K/V projections, attention,
    the modulation head plus one multiply-add per modulated coordinate, and
    the unified encoder.
    """
    ncfg = ncfg or NetConfig()
    names = spec.active(wcfg) if isinstance(spec, AttributeSpec) else list(spec)
    n_active = len(names)
    n_run = len(wcfg.names) if ncfg.static else n_active
    if n_run == 0:
        return 0
    L, D, Du = wcfg.layers, wcfg.dim, ncfg.unified_dim
    expert = L * ((D + 1) * 2 * D + 2 * D * D)
    projections = (3 if ncfg.cross_attention else 1) * L * D * D
    attention = 2 * L * n_run * n_run * D if ncfg.cross_attention else 0
    head = L * (D * 2 * D + D)
    encoder = D * D + D * Du
    return n_run * (expert + projections) + attention + head + n_active * encoder
