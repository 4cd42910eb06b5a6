"""Finite-difference sweep over every loss term and the network forward pass.

Each check draws a fresh random configuration (sizes, values, specs,
parameters) from a seeded stream, so a run is reproducible from its seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import finite_difference_check
from .losses import (
    LossWeights,
    binary_attr_loss,
    dmac_loss,
    identity_loss,
    norm_loss,
    numeric_attr_loss_batch,
)
from .net import DyStyleParams, NetConfig, forward
from .tensor import Tensor
from .trainer import TrainConfig, batch_loss, sample_attribute_config
from .world import WorldConfig, sample_latent, world_build

CHECKS = ("numeric", "binary", "identity", "dmac", "norm", "total", "forward_latent", "forward_params")
# distance kept between sampled points and the kinks of relu/abs/hinge
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: int = 0
    total: int = 0
    worst: float = 0.0
    seconds: float = 0.0
    failures: list[int] = field(default_factory=list)
    # configurations redrawn because a kink sat inside the difference stencil
    redrawn: int = 0

    @property
    def ok(self) -> bool:
        return self.total > 0 and self.passed == self.total


def tiny_world_config() -> WorldConfig:
    return WorldConfig(
        layers=2, dim=4, feature_dim=16, generator_hidden=32, binary_hidden=4, identity_dim=4, calibration_samples=400
    )


def _away_from(values: np.ndarray, rng: np.random.Generator, margin: float = KINK_MARGIN) -> np.ndarray:
    """Nudge entries so none lies within ``margin`` of zero."""
    values = np.array(values, dtype=np.float64)
    close = np.abs(values) < margin
    values[close] = np.where(rng.random(close.sum()) < 0.5, -1.0, 1.0) * (margin + rng.random(close.sum()))
    return values


def _numeric_case(rng):
    n = int(rng.integers(1, 6))
    threshold = float(rng.uniform(0.0, 3.0))
    a_u = rng.normal(0, 5, n)
    deltas = np.where(rng.random(n) < 0.7, rng.uniform(-10, 10, n), np.nan)
    # keep |a_m - a_u| and |a_m - a_u - delta| - threshold off their kinks
    diff = rng.normal(0, 5, n)
    for i in range(n):
        while True:
            if np.isnan(deltas[i]):
                ok = abs(diff[i]) > KINK_MARGIN
            else:
                r = diff[i] - deltas[i]
                ok = abs(r) > KINK_MARGIN and abs(abs(r) - threshold) > KINK_MARGIN
            if ok:
                break
            diff[i] = rng.normal(0, 5)
    x = a_u + diff
    return x, lambda t: T.mean(numeric_attr_loss_batch(t, a_u, deltas, threshold))


def _binary_case(rng):
    f_dim, h_dim, k = int(rng.integers(3, 7)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
    hidden = rng.normal(0, 1, (f_dim, h_dim))
    head = rng.normal(0, 1, (h_dim, k))
    bias = rng.normal(0, 0.5, k)
    x = rng.normal(0, 1, f_dim)
    # two live units, else the cosine term is scale-invariant with an exactly zero gradient
    for _ in range(1000):
        pre = x @ hidden
        if np.all(np.abs(pre) > KINK_MARGIN) and np.sum(pre > 0) >= 2:
            break
        x = rng.normal(0, 1, f_dim)
    emb_u = np.abs(rng.normal(0, 1, h_dim)) + 0.1
    names = [f"b{i}" for i in range(k)]
    untouched = {n: int(rng.integers(2)) for n in names}
    gt = {n: int(rng.integers(2)) for n in names if rng.random() < 0.7} or None

    def f(t):
        pen = T.relu(T.matmul(t, Tensor(hidden)))
        probs = T.sigmoid(T.matmul(pen, Tensor(head)) + Tensor(bias))
        return binary_attr_loss(probs, pen, emb_u, gt, untouched, names)

    return x, f


def _identity_case(rng):
    n, f_dim, e_dim = int(rng.integers(1, 4)), int(rng.integers(3, 7)), int(rng.integers(2, 5))
    proj = rng.normal(0, 1, (f_dim, e_dim))
    emb_u = rng.normal(0, 1, (n, e_dim))
    x = rng.normal(0, 1, (n, f_dim))
    return x, lambda t: identity_loss(T.matmul(t, Tensor(proj)), emb_u)


def _dmac_case(rng):
    batch, k, du = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    active = rng.random((batch, k)) < 0.6
    active[0, :2] = True  # at least one qualifying pair
    active[1, 0] = True
    rows = {f"a{j}": np.flatnonzero(active[:, j]) for j in range(k) if active[:, j].any()}
    sizes = {name: len(r) for name, r in rows.items()}
    x = rng.normal(0, 1, (sum(sizes.values()), du))

    def f(t):
        codes, start = {}, 0
        for name, size in sizes.items():
            codes[name] = T.slice_(t, 0, start, start + size)
            start += size
        return dmac_loss(codes, rows)

    return x, f


def _norm_case(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    w_avg = rng.normal(0, 1, shape[1:])
    x = w_avg + rng.normal(0, 1, shape)
    return x, lambda t: norm_loss(t, w_avg)


def _random_params(world, ncfg, rng) -> DyStyleParams:
    params = DyStyleParams.init(world.config, ncfg, rng)
    # a zero head would hide every path through the experts
    params.arrays["mod.w"] = rng.normal(0, 0.3, params.arrays["mod.w"].shape)
    params.arrays["mod.b"] = rng.normal(0, 0.3, params.arrays["mod.b"].shape)
    return params


def _net_setup(worlds, rng):
    world = worlds[int(rng.integers(len(worlds)))]
    ncfg = NetConfig(unified_dim=int(rng.integers(2, 5)), cross_attention=bool(rng.random() < 0.8), static=bool(rng.random() < 0.2))
    params = _random_params(world, ncfg, rng)
    batch = int(rng.integers(1, 4))
    c = world.config
    w = sample_latent(rng, batch, c.layers, c.dim)
    specs = [sample_attribute_config(int(rng.integers(1, 3)), rng, c) for _ in range(batch)]
    return world, ncfg, params, w, specs


def _total_case(rng, worlds):
    world, ncfg, params, w, specs = _net_setup(worlds, rng)
    weights = LossWeights(
        alpha_numeric={a: float(rng.uniform(0.01, 0.1)) for a in ("yaw", "pitch", "age")},
        alpha_dmac=float(rng.uniform(0, 0.5)),
        alpha_norm=float(rng.uniform(0, 0.01)),
    )
    config = TrainConfig(weights=weights, net=ncfg)
    consts = params.constants()
    return w, lambda t: batch_loss(consts, t, specs, world, config)[0]


def _projected(res, proj_w, proj_codes):
    out = T.sum_(T.mul(res.w_hat, Tensor(proj_w)))
    for name in sorted(res.unified):
        out = out + T.sum_(T.mul(res.unified[name][1], Tensor(proj_codes[name][: res.unified[name][1].shape[0]])))
    return out


def _forward_latent_case(rng, worlds):
    world, ncfg, params, w, specs = _net_setup(worlds, rng)
    proj_w = rng.normal(0, 1, w.shape)
    proj_codes = {n: rng.normal(0, 1, (len(specs), ncfg.unified_dim)) for n in world.config.names}
    consts = params.constants()
    return w, lambda t: _projected(forward(consts, t, specs, world.config, ncfg), proj_w, proj_codes)


def _forward_params_case(rng, worlds):
    world, ncfg, params, w, specs = _net_setup(worlds, rng)
    used = sorted({n for s in specs for n in s.active(world.config)})
    names = ["mod.w", "mod.b", "attn.wv", "attn.bv", "enc.w1", "enc.w2", "enc.b2"]
    if ncfg.cross_attention:
        names += ["attn.wq", "attn.wk"]
    names += [f"expert.{used[0]}.{p}" for p in ("w1", "b1", "w2", "b2")]
    target = names[int(rng.integers(len(names)))]
    proj_w = rng.normal(0, 1, w.shape)
    proj_codes = {n: rng.normal(0, 1, (len(specs), ncfg.unified_dim)) for n in world.config.names}
    consts = params.constants()

    def f(t):
        p = dict(consts)
        p[target] = t
        return _projected(forward(p, w, specs, world.config, ncfg), proj_w, proj_codes)

    return params.arrays[target], f


# checks whose relu/hinge kinks are not controlled by construction
SCREENED = ("total", "forward_latent", "forward_params")
MAX_REDRAWS = 20
# Central-difference step per check. The network-level checks sum many
# O(1) terms, so at 1e-5 round-off swamps coordinates whose gradient is
# small next to the output; 1e-4 keeps them above the noise. The loss
# terms are cheap to condition and curved (logsumexp), so they keep 1e-5.
STEPS = {name: (1e-4 if name in SCREENED else 1e-5) for name in CHECKS}


def straddles_kink(f, x: np.ndarray, eps: float, rel: float = 1e-2, floor: float = 1e-6) -> bool:
    """True when some central-difference stencil point leaves the smooth piece at ``x``.

    Two value-only tests, so neither can mask a wrong analytic gradient:
    every perturbed evaluation must take the same branches as ``x`` in each
    piecewise primitive (see :func:`tensor.branch_log`), and the forward and
    backward one-sided slopes must agree for every coordinate.
    """
    with T.branch_log() as base:
        f0 = f(Tensor(x)).item()
    for index in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[index] += eps
        xm[index] -= eps
        with T.branch_log() as up:
            fp = f(Tensor(xp)).item()
        with T.branch_log() as down:
            fm = f(Tensor(xm)).item()
        if up != base or down != base:
            return True
        fwd = (fp - f0) / eps
        bwd = (f0 - fm) / eps
        if abs(fwd - bwd) > rel * max(abs(fwd), abs(bwd)) + floor:
            return True
    return False


def run_suite(
    seed: int = 0,
    configs: int = 50,
    checks=CHECKS,
    rel_tol: float = 1e-4,
    eps: float | None = None,
    progress: Callable[[CheckResult], None] | None = None,
) -> list[CheckResult]:
    """Run ``configs`` random finite-difference checks for each named check.

    ``eps`` overrides the per-check steps in :data:`STEPS`.
    """
    unknown = [c for c in checks if c not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks {unknown}; known: {list(CHECKS)}")
    rng = np.random.default_rng([seed, 31])
    worlds = [world_build(int(s), tiny_world_config()) for s in rng.integers(0, 2**31, 3)]
    makers = {
        "numeric": _numeric_case,
        "binary": _binary_case,
        "identity": _identity_case,
        "dmac": _dmac_case,
        "norm": _norm_case,
        "total": lambda r: _total_case(r, worlds),
        "forward_latent": lambda r: _forward_latent_case(r, worlds),
        "forward_params": lambda r: _forward_params_case(r, worlds),
    }
    results = []
    for name in checks:
        res = CheckResult(name)
        sub = np.random.default_rng([seed, 32, CHECKS.index(name)])
        step = STEPS[name] if eps is None else eps
        start = time.perf_counter()
        for i in range(configs):
            x, f = makers[name](sub)
            if name in SCREENED:
                for _ in range(MAX_REDRAWS):
                    if not straddles_kink(f, np.asarray(x, dtype=np.float64), step):
                        break
                    res.redrawn += 1
                    x, f = makers[name](sub)
            report = finite_difference_check(f, x, eps=step, rel_tol=rel_tol)
            res.total += 1
            res.worst = max(res.worst, report.max_rel_error)
            if report.passed:
                res.passed += 1
            else:
                res.failures.append(i)
        res.seconds = time.perf_counter() - start
        results.append(res)
        if progress is not None:
            progress(res)
    return results
