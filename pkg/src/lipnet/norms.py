"""Operator norms of linear layers and Lipschitz upper bounds of whole networks.

l1 and linf norms are computed exactly from absolute column/row sums (for
convolutions: from per-filter absolute sums). The l2 norm is estimated with
the power method, which for convolutions applies the layer and its adjoint
instead of materialising the matrix. Power estimates never exceed the true
largest singular value, since ``||W x|| <= sigma_max`` for any unit ``x``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, GeometryError, NumericError
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Layer,
    MaxPool,
    Network,
    ReLU,
    Residual,
    Softmax,
)
from .tensor import ConvGeometry, conv2d, conv2d_transpose

INF = math.inf


@dataclass(frozen=True)
class NormKind:
    """Which operator norm to use. ``max_iters``/``tol``/``warm_start`` only matter for p=2."""

    p: float
    max_iters: int = 1000
    tol: float = 1e-9
    warm_start: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.p not in (1, 2, INF):
            raise ValueError(f"p must be 1, 2 or inf, got {self.p!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    @property
    def label(self) -> str:
        return {1: "l1", 2: "l2", INF: "linf"}[self.p]

    @property
    def exact(self) -> bool:
        return self.p != 2


L1 = NormKind(1)
L2 = NormKind(2)
LINF = NormKind(INF)


def parse_norm(text: str, **l2_options) -> NormKind:
    key = str(text).strip().lower()
    if key in ("1", "l1"):
        return L1
    if key in ("2", "l2"):
        return NormKind(2, **l2_options)
    if key in ("inf", "linf", "l_inf", "infinity"):
        return LINF
    raise ValueError(f"unknown norm {text!r}; expected l1, l2 or linf")


def vector_norm(x, p) -> float:
    return float(np.linalg.norm(np.ravel(x), ord=p))


# ---------------------------------------------------------------------------
# dense layers


def _check_matrix(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise DimensionError(f"expected a non-empty matrix, got shape {W.shape}")
    return W


def _abs_sums(A: np.ndarray, axis: int) -> np.ndarray:
    # Left-to-right accumulation along `axis`; numpy's own reductions switch
    # between sequential and pairwise order depending on memory layout.
    A = np.moveaxis(np.abs(A), axis, 0)
    acc = np.zeros(A.shape[1:])
    for part in A:
        acc += part
    return acc


def opnorm_l1_dense(W) -> float:
    """Maximum absolute column sum."""
    return float(_abs_sums(_check_matrix(W), 0).max())


def opnorm_linf_dense(W) -> float:
    """Maximum absolute row sum."""
    return float(_abs_sums(_check_matrix(W), 1).max())


class PowerResult(NamedTuple):
    sigma: float
    vector: np.ndarray
    iterations: int


def power_method(
    apply: Callable[[np.ndarray], np.ndarray],
    apply_t: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    max_iters: int = 1000,
    tol: float = 1e-9,
) -> PowerResult:
    """Largest singular value of the operator ``apply`` (with adjoint ``apply_t``).

    Iterates ``x <- A^T A x`` with renormalisation and reports ``||A x_n|| / ||x_n||``.
    Stops after ``max_iters`` iterations or once the unit iterate moves by less
    than ``tol`` between steps; a change test on sigma alone stalls far from
    the answer when the top two singular values are close.
    """
    x = np.asarray(x0, dtype=np.float64)
    nx = np.linalg.norm(x)
    if not nx > 0:
        raise NumericError("power method start vector must be nonzero")
    x = x / nx
    u = apply(x)
    sigma = float(np.linalg.norm(u))
    it = 0
    while it < max_iters:
        it += 1
        y = apply_t(u)
        ny = np.linalg.norm(y)
        if not np.isfinite(ny):
            raise NumericError("power method overflowed")
        if ny == 0:
            # x lies in the null space; nothing more to learn from this start
            return PowerResult(0.0, x, it)
        x_new = y / ny
        moved = float(np.linalg.norm(x_new - x))
        x = x_new
        u = apply(x)
        sigma = float(np.linalg.norm(u))
        if moved <= tol:
            break
    return PowerResult(sigma, x, it)


def _start_vector(shape, norm: NormKind, rng) -> np.ndarray:
    if norm.warm_start is not None:
        x0 = np.asarray(norm.warm_start, dtype=np.float64).reshape(shape)
        if not np.any(x0):
            raise NumericError("warm start vector must be nonzero")
        return x0
    rng = np.random.default_rng(0) if rng is None else rng
    x0 = rng.standard_normal(shape)
    return x0 / np.linalg.norm(x0)


def dense_power(W, norm: NormKind = L2, rng=None) -> PowerResult:
    W = _check_matrix(W)
    x0 = _start_vector((W.shape[1],), norm, rng)
    return power_method(lambda v: W @ v, lambda v: W.T @ v, x0, norm.max_iters, norm.tol)


def opnorm_l2_power_dense(W, cfg: NormKind = L2, rng=None) -> tuple[float, np.ndarray]:
    res = dense_power(W, cfg, rng)
    return res.sigma, res.vector


# ---------------------------------------------------------------------------
# convolutional layers


def _check_filters(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 4 or F.size == 0:
        raise DimensionError(f"expected a non-empty (C_out, C_in, k_h, k_w) filter bank, got shape {F.shape}")
    return F


def opnorm_l1_conv(F) -> float:
    """``max_j sum_i ||F[i, j]||_1`` (max over input channels)."""
    return float(np.abs(_check_filters(F)).sum(axis=(2, 3)).sum(axis=0).max())


def opnorm_linf_conv(F) -> float:
    """``max_i sum_j ||F[i, j]||_1`` (max over output channels)."""
    return float(np.abs(_check_filters(F)).sum(axis=(2, 3)).sum(axis=1).max())


def _axis_full_column(n, k, s, p) -> bool:
    # some input index r is touched by every kernel offset u
    out = (n + 2 * p - k) // s + 1
    for r in range(n):
        if all(0 <= r + p - u <= (out - 1) * s and (r + p - u) % s == 0 for u in range(k)):
            return True
    return False


def _axis_full_row(n, k, s, p) -> bool:
    # some output index y reads no padding
    out = (n + 2 * p - k) // s + 1
    return any(y * s - p >= 0 and y * s - p + k <= n for y in range(out))


def conv_norm_is_exact(kernel_hw, geom: ConvGeometry, input_hw, p) -> bool:
    """Whether the filter-sum formula equals the zero-padded operator's norm.

    The formula is always an upper bound; it is attained when some input pixel
    (p=1) or output pixel (p=inf) sees the complete kernel.
    """
    geom.output_size(input_hw, kernel_hw)
    test = _axis_full_column if p == 1 else _axis_full_row
    return all(
        test(n, k, s, pad)
        for n, k, s, pad in zip(input_hw, kernel_hw, geom.stride, geom.padding)
    )


def conv_power(F, geom: ConvGeometry, input_shape, norm: NormKind = L2, rng=None) -> PowerResult:
    F = _check_filters(F)
    input_shape = tuple(input_shape)
    if len(input_shape) != 3 or input_shape[0] != F.shape[1]:
        raise GeometryError(f"input shape {input_shape} does not match filters {F.shape}")
    geom.output_size(input_shape[1:], F.shape[2:])
    hw = input_shape[1:]
    x0 = _start_vector(input_shape, norm, rng)
    return power_method(
        lambda v: conv2d(v, F, None, geom),
        lambda v: conv2d_transpose(v, F, hw, geom),
        x0,
        norm.max_iters,
        norm.tol,
    )


def opnorm_l2_conv_power(F, geom: ConvGeometry, input_shape, cfg: NormKind = L2, rng=None):
    res = conv_power(F, geom, input_shape, cfg, rng)
    return res.sigma, res.vector


def explicit_conv_matrix(F, geom: ConvGeometry, input_shape, cap: int = 4096) -> np.ndarray:
    """Dense matrix of the bias-free conv map on row-major channels-first vectors."""
    F = _check_filters(F)
    c_out, c_in, kh, kw = F.shape
    c, h, w = input_shape
    if c != c_in:
        raise GeometryError(f"input has {c} channels, filters expect {c_in}")
    if c * h * w > cap:
        raise ValueError(f"input size {c * h * w} exceeds explicit-matrix cap {cap}")
    ho, wo = geom.output_size((h, w), (kh, kw))
    sh, sw = geom.stride
    ph, pw = geom.padding
    M = np.zeros((c_out, ho, wo, c_in, h, w))
    for y in range(ho):
        for x in range(wo):
            for u in range(kh):
                r = y * sh + u - ph
                if not 0 <= r < h:
                    continue
                for v in range(kw):
                    q = x * sw + v - pw
                    if 0 <= q < w:
                        M[:, y, x, :, r, q] += F[:, :, u, v]
    return M.reshape(c_out * ho * wo, c_in * h * w)


def flattened_kernel_matrix(F) -> np.ndarray:
    """Filter bank reshaped to ``(C_out, C_in * k_h * k_w)``, one serialised filter row block per output channel."""
    F = _check_filters(F)
    return F.reshape(F.shape[0], -1).copy()


# ---------------------------------------------------------------------------
# other layers


def batchnorm_lipschitz(gamma, running_var, epsilon) -> float:
    gamma = np.asarray(gamma, dtype=np.float64)
    var = np.asarray(running_var, dtype=np.float64)
    if np.any(var < 0):
        raise NumericError("running variance must be non-negative")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return float(np.max(np.abs(gamma) / np.sqrt(var + epsilon)))


def maxpool_lipschitz(window, stride, p) -> float:
    """1 for non-overlapping windows; overlapping windows can count an input up to ``m`` times."""
    m = math.ceil(window[0] / stride[0]) * math.ceil(window[1] / stride[1])
    if p == INF or m == 1:
        return 1.0
    return float(m) if p == 1 else math.sqrt(m)


@dataclass
class LayerBound:
    index: int
    kind: str
    bound: float
    method: str
    dropout_scaled: bool = False
    vector: np.ndarray | None = field(default=None, repr=False)


def layer_bound(
    layer: Layer,
    norm: NormKind,
    input_shape,
    dropout_scaling: bool = False,
    rng=None,
    index: int = 0,
) -> LayerBound:
    input_shape = tuple(input_shape)
    entry = lambda b, m, **kw: LayerBound(index, layer.kind, float(b), m, **kw)
    if isinstance(layer, Dense):
        if norm.p == 1:
            return entry(opnorm_l1_dense(layer.W), "exact")
        if norm.p == INF:
            return entry(opnorm_linf_dense(layer.W), "exact")
        res = dense_power(layer.W, norm, rng)
        return entry(res.sigma, f"power({res.iterations})", vector=res.vector)
    if isinstance(layer, Conv2D):
        layer.output_shape(input_shape)
        if norm.p == 2:
            res = conv_power(layer.F, layer.geom, input_shape, norm, rng)
            return entry(res.sigma, f"power({res.iterations})", vector=res.vector)
        value = opnorm_l1_conv(layer.F) if norm.p == 1 else opnorm_linf_conv(layer.F)
        exact = conv_norm_is_exact(layer.F.shape[2:], layer.geom, input_shape[1:], norm.p)
        return entry(value, "exact" if exact else "bound")
    if isinstance(layer, (ReLU, Softmax)):
        return entry(1.0, "exact" if isinstance(layer, ReLU) else "bound")
    if isinstance(layer, MaxPool):
        return entry(maxpool_lipschitz(layer.window, layer.stride, norm.p), "bound")
    if isinstance(layer, Dropout):
        if dropout_scaling:
            return entry(layer.retain, "exact", dropout_scaled=True)
        return entry(1.0, "bound")
    if isinstance(layer, BatchNorm):
        return entry(batchnorm_lipschitz(layer.gamma, layer.running_var, layer.epsilon), "exact")
    if isinstance(layer, Residual):
        inner = chain_bounds(layer.inner, norm, input_shape, dropout_scaling, rng)
        return entry(1.0 + math.prod(e.bound for e in inner), "composite")
    raise TypeError(f"no Lipschitz rule for layer kind {layer.kind!r}")


def layer_lipschitz(layer: Layer, norm: NormKind, input_shape, dropout_scaling: bool = False, rng=None) -> float:
    return layer_bound(layer, norm, input_shape, dropout_scaling, rng).bound


def chain_bounds(layers: Sequence[Layer], norm, input_shape, dropout_scaling=False, rng=None) -> list[LayerBound]:
    rng = np.random.default_rng(0) if rng is None else rng
    out, shape = [], tuple(input_shape)
    for i, layer in enumerate(layers):
        out.append(layer_bound(layer, norm, shape, dropout_scaling, rng, index=i))
        shape = layer.output_shape(shape)
    return out


@dataclass
class LipschitzReport:
    norm: NormKind
    entries: list[LayerBound]
    network_bound: float

    @property
    def bounds(self) -> list[float]:
        return [e.bound for e in self.entries]


def network_lipschitz(
    net: Network,
    norm: NormKind,
    input_shape=None,
    dropout_scaling: bool = False,
    rng=None,
) -> LipschitzReport:
    """Per-layer bounds and their product; a residual block is one factor."""
    shape = net.input_shape if input_shape is None else tuple(input_shape)
    entries = chain_bounds(net.layers, norm, shape, dropout_scaling, rng)
    return LipschitzReport(norm, entries, float(math.prod(e.bound for e in entries)))


def audit(
    net: Network,
    ps: Sequence[float] = (1, 2, INF),
    dropout_scaling: bool = False,
    l2_iters: int = 1000,
    l2_tol: float = 1e-9,
    seed: int = 0,
) -> dict[float, LipschitzReport]:
    """Reports for several norms, with l2 iterated to convergence."""
    reports = {}
    for p in ps:
        norm = NormKind(p, max_iters=l2_iters, tol=l2_tol) if p == 2 else NormKind(p)
        reports[p] = network_lipschitz(net, norm, None, dropout_scaling, np.random.default_rng(seed))
    return reports


_COLUMNS = {1: "p1_bound", 2: "p2_bound", INF: "pinf_bound"}


def write_report_csv(reports: dict[float, LipschitzReport], path) -> None:
    """Columns: layer, kind, p1_bound, p2_bound, pinf_bound, method. The last row holds the network product."""
    any_report = next(iter(reports.values()))
    n = len(any_report.entries)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "kind", *_COLUMNS.values(), "method"])
        for i in range(n):
            row = [i, any_report.entries[i].kind]
            methods = []
            for p, col in _COLUMNS.items():
                if p in reports:
                    e = reports[p].entries[i]
                    row.append(repr(e.bound))
                    methods.append(f"{col[:-6]}={e.method}")
                else:
                    row.append("")
            row.append(";".join(methods))
            w.writerow(row)
        row = ["network", "product"]
        for p in _COLUMNS:
            row.append(repr(reports[p].network_bound) if p in reports else "")
        row.append("product")
        w.writerow(row)


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# empirical lower bound


def empirical_lipschitz(
    net: Network,
    p,
    box: tuple[float, float] = (-1.0, 1.0),
    n_pairs: int = 1000,
    rng: np.random.Generator | None = None,
    delta: float = 1e-4,
) -> float:
    """Largest observed ``||f(x1) - f(x2)||_p / ||x1 - x2||_p``, a lower bound on L(f).

    Half of the pairs are independent uniform draws from the box; the other
    half are small perturbations ``x, x + d`` where ``d`` is a random sign
    vector (p=inf), a signed basis vector (p=1) or a Gaussian direction (p=2).
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    lo, hi = float(box[0]), float(box[1])
    shape = net.input_shape
    d = math.prod(shape)
    x1 = rng.uniform(lo, hi, size=(n_pairs, *shape))
    x2 = rng.uniform(lo, hi, size=(n_pairs, *shape))
    base = rng.uniform(lo, hi, size=(n_pairs, d))
    if p == INF:
        direction = rng.choice([-1.0, 1.0], size=(n_pairs, d))
    elif p == 1:
        direction = np.zeros((n_pairs, d))
        direction[np.arange(n_pairs), rng.integers(0, d, size=n_pairs)] = rng.choice([-1.0, 1.0], size=n_pairs)
    else:
        direction = rng.standard_normal((n_pairs, d))
    step = delta * max(hi - lo, 1e-12)
    x3 = base.reshape(n_pairs, *shape)
    x4 = (base + step * direction).reshape(n_pairs, *shape)
    a = np.concatenate([x1, x3])
    b = np.concatenate([x2, x4])
    fa, fb = net(a), net(b)
    num = np.linalg.norm((fa - fb).reshape(len(a), -1), ord=p, axis=1)
    den = np.linalg.norm((a - b).reshape(len(a), -1), ord=p, axis=1)
    keep = den > 0
    if not np.any(keep):
        return 0.0
    return float(np.max(num[keep] / den[keep]))
