"""Layers with forward evaluation and hand-written backpropagation.

Every layer works on a batch whose first axis is the sample axis. ``forward``
returns the output together with a :class:`ForwardCache`; ``backward`` consumes
that cache and returns the input gradient and a flat ``{name: grad}`` dict
keyed like :meth:`Layer.named_parameters`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import CacheError, DimensionError, InitError, NumericError
from .tensor import (
    ConvGeometry,
    conv2d,
    conv2d_filter_grad,
    conv2d_transpose,
    maxpool2d,
    maxpool2d_backward,
    pool_output_size,
)

TRAIN, EVAL = "train", "eval"
_tokens = itertools.count(1)


@dataclass
class ForwardCache:
    layer: "Layer"
    token: int
    in_shape: tuple
    out_shape: tuple
    data: dict = field(default_factory=dict)


class Layer:
    kind: str = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self._token = 0

    # -- shapes -------------------------------------------------------------
    def output_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    # -- evaluation ---------------------------------------------------------
    def forward(self, x, mode: str = EVAL, rng: np.random.Generator | None = None):
        x = np.asarray(x, dtype=np.float64)
        if mode not in (TRAIN, EVAL):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim < 2:
            raise DimensionError(f"{self.kind}: expected a batch with leading sample axis, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        self._token = next(_tokens)
        out, data = self._forward(x, mode, rng)
        return out, ForwardCache(self, self._token, x.shape, out.shape, data)

    def backward(self, cache: ForwardCache, grad_out):
        if cache.layer is not self or cache.token != self._token:
            raise CacheError(f"{self.kind}: cache does not belong to this layer's latest forward pass")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != cache.out_shape:
            raise CacheError(f"{self.kind}: grad_out shape {grad_out.shape} != forward output shape {cache.out_shape}")
        return self._backward(cache, grad_out)

    def _forward(self, x, mode, rng):
        raise NotImplementedError

    def _backward(self, cache, g):
        raise NotImplementedError

    def __call__(self, x, mode: str = EVAL, rng=None) -> np.ndarray:
        return self.forward(x, mode, rng)[0]

    # -- parameters ---------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.params.items()

    def hyperparameters(self) -> dict:
        return {}

    def __repr__(self):
        hp = ", ".join(f"{k}={v!r}" for k, v in self.hyperparameters().items())
        return f"{type(self).__name__}({hp})"


class Dense(Layer):
    """Affine map ``W x + b``. Inputs with trailing rank > 1 are flattened row-major."""

    kind = "dense"

    def __init__(self, W, b=None):
        super().__init__()
        W = np.array(W, dtype=np.float64)
        if W.ndim != 2:
            raise DimensionError(f"dense weight must be a matrix, got shape {W.shape}")
        b = np.zeros(W.shape[0]) if b is None else np.array(b, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"dense bias must have shape ({W.shape[0]},), got {b.shape}")
        self.params = {"W": W, "b": b}

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "Dense":
        return cls(glorot_init((n_out, n_in), rng), np.zeros(n_out))

    @property
    def W(self) -> np.ndarray:
        return self.params["W"]

    @property
    def b(self) -> np.ndarray:
        return self.params["b"]

    def output_shape(self, in_shape):
        n_in = math.prod(in_shape)
        if n_in != self.W.shape[1]:
            raise DimensionError(f"dense expects {self.W.shape[1]} input features, got shape {tuple(in_shape)}")
        return (self.W.shape[0],)

    def _forward(self, x, mode, rng):
        x2 = x.reshape(x.shape[0], -1)
        return x2 @ self.W.T + self.b, {"x": x2}

    def _backward(self, cache, g):
        x2 = cache.data["x"]
        grads = {"W": g.T @ x2, "b": g.sum(axis=0)}
        return (g @ self.W).reshape(cache.in_shape), grads


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, F, b=None, stride=1, padding=0):
        super().__init__()
        F = np.array(F, dtype=np.float64)
        if F.ndim != 4:
            raise DimensionError(f"conv filters must be (C_out, C_in, k_h, k_w), got {F.shape}")
        b = np.zeros(F.shape[0]) if b is None else np.array(b, dtype=np.float64)
        if b.shape != (F.shape[0],):
            raise DimensionError(f"conv bias must have shape ({F.shape[0]},), got {b.shape}")
        self.geom = ConvGeometry(stride, padding)
        self.params = {"F": F, "b": b}

    @classmethod
    def init(cls, c_in, c_out, kernel, rng, stride=1, padding=0) -> "Conv2D":
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        return cls(glorot_init((c_out, c_in, kh, kw), rng), np.zeros(c_out), stride, padding)

    @property
    def F(self) -> np.ndarray:
        return self.params["F"]

    @property
    def b(self) -> np.ndarray:
        return self.params["b"]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.F.shape[1]:
            raise DimensionError(f"conv2d expects ({self.F.shape[1]}, H, W) inputs, got {tuple(in_shape)}")
        return (self.F.shape[0], *self.geom.output_size(in_shape[1:], self.F.shape[2:]))

    def hyperparameters(self):
        return {"stride": list(self.geom.stride), "padding": list(self.geom.padding)}

    def _forward(self, x, mode, rng):
        return conv2d(x, self.F, self.b, self.geom), {"x": x}

    def _backward(self, cache, g):
        x = cache.data["x"]
        grads = {
            "F": conv2d_filter_grad(x, g, self.F.shape[2:], self.geom),
            "b": g.sum(axis=(0, 2, 3)),
        }
        return conv2d_transpose(g, self.F, x.shape[2:], self.geom), grads


class ReLU(Layer):
    kind = "relu"

    def _forward(self, x, mode, rng):
        mask = x > 0
        return np.where(mask, x, 0.0), {"mask": mask}

    def _backward(self, cache, g):
        # subgradient at 0 is taken as 0
        return np.where(cache.data["mask"], g, 0.0), {}


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = (window, window) if isinstance(window, int) else tuple(window)
        stride = self.window if stride is None else stride
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"maxpool expects (C, H, W) inputs, got {tuple(in_shape)}")
        return (in_shape[0], *pool_output_size(in_shape[1:], self.window, self.stride))

    def hyperparameters(self):
        return {"window": list(self.window), "stride": list(self.stride)}

    def _forward(self, x, mode, rng):
        out, idx = maxpool2d(x, self.window, self.stride)
        return out, {"idx": idx}

    def _backward(self, cache, g):
        return maxpool2d_backward(g, cache.data["idx"], cache.in_shape[2:]), {}


class BatchNorm(Layer):
    """Per-channel batch normalisation over axis 1.

    Train mode normalises with biased batch statistics and updates the running
    estimates in place (unbiased variance); eval mode uses the running estimates.
    """

    kind = "batchnorm"

    def __init__(self, gamma, beta=None, running_mean=None, running_var=None, epsilon=1e-5, momentum=0.1):
        super().__init__()
        gamma = np.array(gamma, dtype=np.float64)
        if gamma.ndim != 1:
            raise DimensionError(f"gamma must be a vector, got shape {gamma.shape}")
        c = gamma.shape[0]
        vec = lambda v, fill: np.full(c, fill, dtype=np.float64) if v is None else np.array(v, dtype=np.float64)
        beta, rm, rv = vec(beta, 0.0), vec(running_mean, 0.0), vec(running_var, 1.0)
        for name, v in (("beta", beta), ("running_mean", rm), ("running_var", rv)):
            if v.shape != (c,):
                raise DimensionError(f"{name} must have shape ({c},), got {v.shape}")
        if np.any(rv < 0):
            raise NumericError("running_var must be non-negative")
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.params = {"gamma": gamma, "beta": beta}
        self.running_mean, self.running_var = rm, rv
        self.epsilon, self.momentum = float(epsilon), float(momentum)

    @classmethod
    def init(cls, channels: int, **kw) -> "BatchNorm":
        return cls(np.ones(channels), **kw)

    @property
    def gamma(self):
        return self.params["gamma"]

    @property
    def beta(self):
        return self.params["beta"]

    def output_shape(self, in_shape):
        if in_shape[0] != self.gamma.shape[0]:
            raise DimensionError(f"batchnorm expects {self.gamma.shape[0]} channels, got shape {tuple(in_shape)}")
        return tuple(in_shape)

    def hyperparameters(self):
        return {"epsilon": self.epsilon, "momentum": self.momentum}

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def _forward(self, x, mode, rng):
        axes = (0,) + tuple(range(2, x.ndim))
        bc = lambda v: self._bcast(v, x.ndim)
        if mode == TRAIN:
            m = x.size // x.shape[1]
            if m < 2:
                raise NumericError("batchnorm in train mode needs more than one value per channel")
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            mom = self.momentum
            self.running_mean[...] = (1 - mom) * self.running_mean + mom * mu
            self.running_var[...] = (1 - mom) * self.running_var + mom * var * (m / (m - 1))
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - bc(mu)) * bc(inv_std)
        out = bc(self.gamma) * xhat + bc(self.beta)
        return out, {"xhat": xhat, "inv_std": inv_std, "mode": mode, "axes": axes}

    def _backward(self, cache, g):
        xhat, inv_std, axes = cache.data["xhat"], cache.data["inv_std"], cache.data["axes"]
        bc = lambda v: self._bcast(v, g.ndim)
        grads = {"gamma": (g * xhat).sum(axis=axes), "beta": g.sum(axis=axes)}
        dxhat = g * bc(self.gamma)
        if cache.data["mode"] == EVAL:
            return dxhat * bc(inv_std), grads
        m = g.size // g.shape[1]
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        dx = bc(inv_std / m) * (m * dxhat - bc(s1) - xhat * bc(s2))
        return dx, grads


class Dropout(Layer):
    """Non-inverted dropout: train mode applies a 0/1 keep mask, eval mode scales by ``retain``."""

    kind = "dropout"

    def __init__(self, retain: float = 0.5):
        super().__init__()
        if not 0 < retain <= 1:
            raise ValueError(f"retain probability must lie in (0, 1], got {retain}")
        self.retain = float(retain)

    def hyperparameters(self):
        return {"retain": self.retain}

    def _forward(self, x, mode, rng):
        if mode == EVAL:
            return x * self.retain, {"scale": self.retain}
        if rng is None:
            raise ValueError("dropout in train mode needs a random generator")
        mask = (rng.random(x.shape) < self.retain).astype(np.float64)
        return x * mask, {"scale": mask}

    def _backward(self, cache, g):
        return g * cache.data["scale"], {}


class Softmax(Layer):
    """Softmax along the feature axis (axis 1)."""

    kind = "softmax"

    def _forward(self, x, mode, rng):
        s = _softmax(x)
        return s, {"s": s}

    def _backward(self, cache, g):
        s = cache.data["s"]
        return s * (g - (g * s).sum(axis=1, keepdims=True)), {}


class Residual(Layer):
    """``x + inner(x)`` for a shape-preserving inner chain."""

    kind = "residual"

    def __init__(self, inner: Sequence[Layer]):
        super().__init__()
        self.inner = list(inner)

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for layer in self.inner:
            shape = layer.output_shape(shape)
        if shape != tuple(in_shape):
            raise DimensionError(f"residual inner chain maps {tuple(in_shape)} to {shape}")
        return shape

    def named_parameters(self):
        for i, layer in enumerate(self.inner):
            for name, p in layer.named_parameters():
                yield f"{i}.{name}", p

    def _forward(self, x, mode, rng):
        h, caches = forward_chain(self.inner, x, mode, rng)
        return x + h, {"caches": caches}

    def _backward(self, cache, g):
        gi, grads = backward_chain(self.inner, cache.data["caches"], g)
        return g + gi, grads


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_chain(layers: Sequence[Layer], x, mode=EVAL, rng=None):
    caches = []
    for layer in layers:
        x, c = layer.forward(x, mode, rng)
        caches.append(c)
    return np.asarray(x, dtype=np.float64), caches


def backward_chain(layers: Sequence[Layer], caches, grad):
    if len(caches) != len(layers):
        raise CacheError(f"got {len(caches)} caches for {len(layers)} layers")
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(len(layers))):
        grad, g = layers[i].backward(caches[i], grad)
        for name, v in g.items():
            grads[f"{i}.{name}"] = v
    return grad, grads


LOSSES = ("mse", "softmax_cross_entropy")


class Network:
    """Ordered chain of layers with a loss kind and a declared per-sample input shape."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], loss: str = "mse"):
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.loss = loss
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Per-layer input shapes followed by the output shape."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def forward(self, x, mode=EVAL, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"network expects samples of shape {self.input_shape}, got batch shape {x.shape}")
        return forward_chain(self.layers, x, mode, rng)

    def backward(self, caches, grad):
        return backward_chain(self.layers, caches, grad)

    def __call__(self, x, mode=EVAL, rng=None) -> np.ndarray:
        return self.forward(x, mode, rng)[0]

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_parameters():
                yield f"{i}.{name}", p

    def __repr__(self):
        return f"Network({self.layers!r}, input_shape={self.input_shape}, loss={self.loss!r})"


def network_forward(net: Network, batch, mode=EVAL, rng=None):
    return net.forward(batch, mode, rng)


def network_backward(net: Network, caches, grad_of_loss):
    return net.backward(caches, grad_of_loss)


def glorot_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot init; conv fans include the kernel area."""
    shape = tuple(int(d) for d in shape)
    if len(shape) < 2:
        raise InitError(f"glorot init needs at least 2 axes, got shape {shape}")
    area = math.prod(shape[2:])
    bound = math.sqrt(6.0 / (shape[1] * area + shape[0] * area))
    return rng.uniform(-bound, bound, size=shape)


def mlp(sizes: Sequence[int], rng: np.random.Generator, loss: str = "mse") -> Network:
    """Dense/ReLU chain ``sizes[0] -> ... -> sizes[-1]`` with a linear output layer."""
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense.init(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return Network(layers, (sizes[0],), loss)


def spread_kinks(layer: Dense, lo: float, hi: float, rng: np.random.Generator, gain: float = 1.0) -> Dense:
    """Re-initialise a 1-input dense layer feeding a ReLU so the units' kinks tile ``[lo, hi]``.

    Weights are multiplied by ``gain``; unit ``i`` gets bias ``-w_i c_i`` with the
    kink locations ``c`` drawn one per equal-width stratum of the interval (in
    random order). Plain uniform kinks leave gaps wider than a period of a
    high-frequency target; stratification bounds every gap by two strata.
    """
    if layer.W.shape[1] != 1:
        raise InitError(f"kink spreading needs a single input feature, got {layer.W.shape[1]}")
    if not lo < hi:
        raise InitError(f"invalid kink range [{lo}, {hi}]")
    h = layer.W.shape[0]
    layer.W[...] *= gain
    centres = lo + (hi - lo) * (np.arange(h) + rng.uniform(0.0, 1.0, h)) / h
    layer.b[...] = -layer.W[:, 0] * rng.permutation(centres)
    return layer


def compute_loss(kind: str, predictions, targets) -> tuple[float, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64)
    if kind == "mse":
        t = np.asarray(targets, dtype=np.float64)
        if t.shape != p.shape:
            raise DimensionError(f"mse: predictions {p.shape} vs targets {t.shape}")
        d = p - t
        return float(np.mean(d * d)), 2.0 * d / d.size
    if kind == "softmax_cross_entropy":
        t = np.asarray(targets)
        if p.ndim != 2 or t.shape != (p.shape[0],):
            raise DimensionError(f"cross-entropy: logits {p.shape} vs class indices {t.shape}")
        t = t.astype(np.int64)
        z = p - p.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        n = p.shape[0]
        loss = float(np.mean(logsum - z[np.arange(n), t]))
        grad = _softmax(p)
        grad[np.arange(n), t] -= 1.0
        return loss, grad / n
    raise ValueError(f"unknown loss {kind!r}")
