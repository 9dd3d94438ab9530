"""Stochastic gradient updates and the projected training loop.

Each minibatch does forward, loss, backward, an optimizer update, and then
projects every constrained layer back into its feasible set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .constraint import ConstraintConfig, constrain_network, strict_project
from .errors import ConfigError, DimensionError, DivergenceError
from .layers import TRAIN, Network, compute_loss
from .norms import network_lipschitz


def _check(param, grad):
    if np.shape(param) != np.shape(grad):
        raise DimensionError(f"parameter shape {np.shape(param)} != gradient shape {np.shape(grad)}")


def sgd_nesterov_step(param, grad, state: dict, lr: float, mu: float):
    """``v' = mu v - lr g``; ``param' = param + mu v' - lr g``."""
    _check(param, grad)
    v = state.get("velocity")
    v = np.zeros_like(param, dtype=np.float64) if v is None else v
    v_new = mu * v - lr * grad
    return param + mu * v_new - lr * grad, {"velocity": v_new, "t": state.get("t", 0) + 1}


def amsgrad_step(param, grad, state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
    """AMSGrad without bias correction."""
    _check(param, grad)
    zeros = lambda: np.zeros_like(param, dtype=np.float64)
    m = state.get("m", None)
    v = state.get("v", None)
    vhat = state.get("vhat", None)
    m = beta1 * (zeros() if m is None else m) + (1 - beta1) * grad
    v = beta2 * (zeros() if v is None else v) + (1 - beta2) * grad * grad
    vhat = np.maximum(zeros() if vhat is None else vhat, v)
    new = param - lr * m / (np.sqrt(vhat) + eps)
    return new, {"m": m, "v": v, "vhat": vhat, "t": state.get("t", 0) + 1}


@dataclass(frozen=True)
class SGDNesterov:
    lr: float = 0.01
    momentum: float = 0.9
    kind = "sgd_nesterov"

    def __post_init__(self):
        if not self.lr >= 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"invalid SGD settings lr={self.lr}, momentum={self.momentum}")

    def step(self, param, grad, state, lr):
        return sgd_nesterov_step(param, grad, state, lr, self.momentum)


@dataclass(frozen=True)
class AMSGrad:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    kind = "amsgrad"

    def __post_init__(self):
        if not self.lr >= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or not self.eps > 0:
            raise ConfigError(f"invalid AMSGrad settings {self}")

    def step(self, param, grad, state, lr):
        return amsgrad_step(param, grad, state, lr, self.beta1, self.beta2, self.eps)


def make_optimizer(spec: dict):
    spec = dict(spec)
    kind = spec.pop("kind", "amsgrad")
    try:
        if kind == "amsgrad":
            return AMSGrad(**spec)
        if kind in ("sgd_nesterov", "sgd"):
            return SGDNesterov(**spec)
    except TypeError as exc:
        raise ConfigError(f"bad optimizer settings: {exc}") from None
    raise ConfigError(f"unknown optimizer kind {kind!r}")


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    optimizer: SGDNesterov | AMSGrad = field(default_factory=AMSGrad)
    lr_schedule: Sequence[tuple[int, float]] = ()
    constraint: ConstraintConfig | None = None
    shuffle: bool = True
    track_bound: bool = False
    strict_final: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        epochs = [int(e) for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError("lr_schedule epochs must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch`` after all drops at or before it."""
        lr = self.optimizer.lr
        for e, mult in self.lr_schedule:
            if epoch >= e:
                lr *= mult
        return lr


@dataclass
class History:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    bound: list[float] = field(default_factory=list)
    norm_label: str = ""

    def rows(self):
        for i, e in enumerate(self.epochs):
            row = [e, self.train_loss[i]]
            if self.bound:
                row.append(self.bound[i])
            yield row

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["epoch", "train_loss"]
            if self.bound:
                header.append(f"bound_{self.norm_label or 'network'}")
            w.writerow(header)
            for row in self.rows():
                w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def train(
    net: Network,
    dataset,
    cfg: TrainConfig,
    callback: Callable[[int, Network], None] | None = None,
):
    """Projected stochastic gradient training; mutates ``net`` and returns ``(net, history)``.

    ``dataset`` is anything with ``inputs`` and ``targets`` arrays sharing a leading axis.
    ``callback(step, net)`` runs after the projection of every minibatch.
    Shuffling, dropout masks and power-method starts all derive from ``cfg.seed``.
    """
    x = np.asarray(dataset.inputs, dtype=np.float64)
    y = np.asarray(dataset.targets)
    n = x.shape[0]
    if n < 1 or y.shape[0] != n:
        raise DimensionError(f"inputs ({x.shape}) and targets ({y.shape}) need equal non-zero length")
    shuffle_rng, dropout_rng, power_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    params = dict(net.named_parameters())
    opt_state: dict[str, dict] = {k: {} for k in params}
    power_state: dict = {}
    con = cfg.constraint
    constrained = con is not None and con.bounded
    history = History(norm_label=con.norm.label if con is not None else "")
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out, caches = net.forward(x[idx], TRAIN, dropout_rng)
            loss, grad = compute_loss(net.loss, out, y[idx])
            step += 1
            if not math.isfinite(loss):
                raise DivergenceError(step)
            _, grads = net.backward(caches, grad)
            for k, p in params.items():
                new, opt_state[k] = cfg.optimizer.step(p, grads[k], opt_state[k], lr)
                p[...] = new
            if constrained:
                constrain_network(net, con, power_state, power_rng)
            total += loss * len(idx)
            if callback is not None:
                callback(step, net)
        history.epochs.append(epoch)
        history.train_loss.append(total / n)
        if cfg.track_bound and con is not None:
            history.bound.append(network_lipschitz(net, con.norm, rng=np.random.default_rng(cfg.seed)).network_bound)
    if constrained and cfg.strict_final:
        strict_project(net, con, power_state, power_rng)
    return net, history
