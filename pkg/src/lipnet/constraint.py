"""Per-layer Lipschitz constraint: the projection ``W / max(1, ||W|| / lam)``.

Dense weights, conv filter banks and batchnorm ``gamma`` are rescaled in
place; biases, ``beta`` and running statistics are never touched. With exact
norms (l1, linf, batchnorm) the rescaled parameter is nudged down by ulps
until its recomputed norm is ``<= lam``, which makes the projection
idempotent to the bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import BatchNorm, Conv2D, Dense, Layer, Network, Residual
from .norms import (
    INF,
    L2,
    NormKind,
    batchnorm_lipschitz,
    conv_power,
    dense_power,
    opnorm_l1_conv,
    opnorm_l1_dense,
    opnorm_linf_conv,
    opnorm_linf_dense,
)

PowerState = dict  # layer path ("3" or "3.1" inside residual blocks) -> unit vector


@dataclass
class ConstraintConfig:
    lam: float = INF
    norm: NormKind = L2
    power_iters_train: int = 1
    epsilon_bn: float | None = None  # None: use each batchnorm layer's own epsilon
    overrides: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        self.lam = float(self.lam)
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.power_iters_train < 1:
            raise ValueError("power_iters_train must be positive")
        for k, v in self.overrides.items():
            if not v > 0:
                raise ValueError(f"override for layer {k} must be positive, got {v}")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lam) or any(math.isfinite(v) for v in self.overrides.values())

    def lam_for(self, index: int) -> float:
        return float(self.overrides.get(index, self.lam))


def project_matrix(W, lam: float, norm_value: float) -> np.ndarray:
    """``W / max(1, norm_value / lam)``; returns ``W`` itself when already feasible."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    factor = max(1.0, norm_value / lam)
    if factor == 1.0:
        return W
    return W / factor


def project_exact(W, lam: float, norm_fn: Callable[[np.ndarray], float]) -> np.ndarray:
    """Projection with an exactly computable norm; the result satisfies ``norm_fn(W') <= lam``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    value = norm_fn(W)
    if value <= lam:
        return W
    factor = value / lam
    out = W / factor
    while norm_fn(out) > lam:
        factor = np.nextafter(factor, np.inf)
        out = W / factor
    return out


def _exact_norm_fn(layer: Layer, p) -> Callable[[np.ndarray], float]:
    if isinstance(layer, Dense):
        return opnorm_l1_dense if p == 1 else opnorm_linf_dense
    return opnorm_l1_conv if p == 1 else opnorm_linf_conv


def _power(layer, norm: NormKind, input_shape, warm, rng):
    if isinstance(layer, Dense):
        return dense_power(layer.W, NormKind(2, norm.max_iters, norm.tol, warm), rng)
    return conv_power(layer.F, layer.geom, input_shape, NormKind(2, norm.max_iters, norm.tol, warm), rng)


def project_layer(
    layer: Layer,
    cfg: ConstraintConfig,
    state: PowerState | None = None,
    rng: np.random.Generator | None = None,
    input_shape=None,
    path: str = "0",
    lam: float | None = None,
    strict: bool = False,
):
    """Project one layer in place and return ``(layer, state)``.

    ``input_shape`` is the per-sample input shape and is needed for l2 on conv
    layers. For l2, ``cfg.power_iters_train`` warm-started iterations are used,
    or iteration to convergence when ``strict`` is set.
    """
    state = {} if state is None else state
    lam = cfg.lam if lam is None else lam
    if not math.isfinite(lam):
        return layer, state
    if isinstance(layer, (Dense, Conv2D)):
        key = "W" if isinstance(layer, Dense) else "F"
        w = layer.params[key]
        if cfg.norm.p == 2:
            iters = cfg.norm.max_iters if strict else cfg.power_iters_train
            norm = NormKind(2, iters, cfg.norm.tol)
            res = _power(layer, norm, input_shape, state.get(path), rng)
            state[path] = res.vector
            new = project_matrix(w, lam, res.sigma)
        else:
            new = project_exact(w, lam, _exact_norm_fn(layer, cfg.norm.p))
        if new is not w:
            w[...] = new
    elif isinstance(layer, BatchNorm):
        eps = layer.epsilon if cfg.epsilon_bn is None else cfg.epsilon_bn
        g = layer.gamma
        new = project_exact(g, lam, lambda v: batchnorm_lipschitz(v, layer.running_var, eps))
        if new is not g:
            g[...] = new
    elif isinstance(layer, Residual):
        shape = input_shape
        for j, inner in enumerate(layer.inner):
            project_layer(inner, cfg, state, rng, shape, f"{path}.{j}", lam, strict)
            shape = inner.output_shape(shape) if shape is not None else None
    return layer, state


def constrain_network(
    net: Network,
    cfg: ConstraintConfig,
    states: PowerState | None = None,
    rng: np.random.Generator | None = None,
    strict: bool = False,
):
    """Apply :func:`project_layer` to every layer; identity when ``lam`` is unbounded."""
    states = {} if states is None else states
    if not cfg.bounded:
        return net, states
    rng = np.random.default_rng(0) if rng is None else rng
    shapes = net.shapes()
    for i, layer in enumerate(net.layers):
        project_layer(layer, cfg, states, rng, shapes[i], str(i), cfg.lam_for(i), strict)
    return net, states


def strict_project(
    net: Network,
    cfg: ConstraintConfig,
    states: PowerState | None = None,
    rng: np.random.Generator | None = None,
    rel_tol: float = 1e-6,
    max_rounds: int = 50,
):
    """Project, then re-estimate l2 norms to convergence until every layer
    satisfies ``sigma <= lam * (1 + rel_tol)``. Exact norms need a single pass."""
    states = {} if states is None else states
    rng = np.random.default_rng(0) if rng is None else rng
    constrain_network(net, cfg, states, rng, strict=True)
    if cfg.norm.p != 2 or not cfg.bounded:
        return net, states
    for _ in range(max_rounds):
        worst = max((r for r in _l2_ratios(net, cfg, states, rng)), default=0.0)
        if worst <= 1 + rel_tol:
            break
        constrain_network(net, cfg, states, rng, strict=True)
    return net, states


def _l2_ratios(net: Network, cfg: ConstraintConfig, states, rng):
    """Converged sigma / lam for every constrained dense/conv layer."""
    norm = NormKind(2, cfg.norm.max_iters, cfg.norm.tol)

    def walk(layer, shape, path, lam):
        if isinstance(layer, (Dense, Conv2D)):
            res = _power(layer, norm, shape, states.get(path), rng)
            states[path] = res.vector
            yield res.sigma / lam
        elif isinstance(layer, Residual):
            for j, inner in enumerate(layer.inner):
                yield from walk(inner, shape, f"{path}.{j}", lam)
                shape = inner.output_shape(shape)

    shapes = net.shapes()
    for i, layer in enumerate(net.layers):
        lam = cfg.lam_for(i)
        if math.isfinite(lam):
            yield from walk(layer, shapes[i], str(i), lam)
