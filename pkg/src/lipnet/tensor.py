"""Dense float64 primitives: matmul, 2-D convolution and its adjoint, max pooling.

Tensors are plain ``numpy`` arrays of dtype float64, channels-first and
row-major. Spatial operations accept a single sample ``(C, H, W)`` or a
batch ``(N, C, H, W)`` and return the same rank they were given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GeometryError


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise GeometryError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvGeometry:
    """Stride and symmetric zero padding per spatial axis."""

    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __init__(self, stride=1, padding=0):
        s, p = _pair(stride), _pair(padding)
        if min(s) < 1:
            raise GeometryError(f"stride must be positive, got {s}")
        if min(p) < 0:
            raise GeometryError(f"padding must be non-negative, got {p}")
        object.__setattr__(self, "stride", s)
        object.__setattr__(self, "padding", p)

    def output_size(self, in_hw, kernel_hw) -> tuple[int, int]:
        out = []
        for n, k, s, p in zip(in_hw, kernel_hw, self.stride, self.padding):
            o = (n + 2 * p - k) // s + 1
            if n + 2 * p - k < 0 or o < 1:
                raise GeometryError(
                    f"kernel {tuple(kernel_hw)} does not fit input {tuple(in_hw)} "
                    f"with stride {self.stride} and padding {self.padding}"
                )
            out.append(o)
        return out[0], out[1]


def as_tensor(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0 or 0 in a.shape:
        raise DimensionError(f"tensor shape must be non-empty with positive dims, got {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def _batched(x: np.ndarray, rank: int = 4) -> tuple[np.ndarray, bool]:
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionError(f"expected a rank-{rank - 1} or rank-{rank} tensor, got shape {x.shape}")
    return x, False


def _windows(xp: np.ndarray, kh: int, kw: int, stride, out_hw) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view over the padded input
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    sh, sw = stride
    ho, wo = out_hw
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def conv2d(x, filters, bias=None, geom: ConvGeometry | None = None) -> np.ndarray:
    """Cross-correlation with zero padding.

    ``out[i, y, x] = sum_j sum_{u,v} F[i, j, u, v] * pad(X)[j, y*s + u, x*s + v] + b[i]``
    """
    geom = geom or ConvGeometry()
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(filters, dtype=np.float64)
    xb, single = _batched(x)
    if f.ndim != 4:
        raise DimensionError(f"filters must be (C_out, C_in, k_h, k_w), got {f.shape}")
    c_out, c_in, kh, kw = f.shape
    if xb.shape[1] != c_in:
        raise DimensionError(f"input has {xb.shape[1]} channels, filters expect {c_in}")
    out_hw = geom.output_size(xb.shape[2:], (kh, kw))
    ph, pw = geom.padding
    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _windows(xp, kh, kw, geom.stride, out_hw)
    n = xb.shape[0]
    ho, wo = out_hw
    # (N*Ho*Wo, C_in*kh*kw) @ (C_in*kh*kw, C_out)
    a = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    out = (a @ f.reshape(c_out, -1).T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (c_out,):
            raise DimensionError(f"bias must have shape ({c_out},), got {b.shape}")
        out = out + b[None, :, None, None]
    return out[0] if single else out


def conv2d_transpose(y, filters, input_hw, geom: ConvGeometry | None = None) -> np.ndarray:
    """Adjoint of :func:`conv2d` (without bias) mapping back to spatial size ``input_hw``."""
    geom = geom or ConvGeometry()
    y = np.asarray(y, dtype=np.float64)
    f = np.asarray(filters, dtype=np.float64)
    yb, single = _batched(y)
    c_out, c_in, kh, kw = f.shape
    h, w = _pair(input_hw)
    out_hw = geom.output_size((h, w), (kh, kw))
    if yb.shape[1] != c_out or tuple(yb.shape[2:]) != out_hw:
        raise GeometryError(
            f"input of shape {yb.shape[1:]} is inconsistent with target spatial size {(h, w)}: "
            f"expected {(c_out, *out_hw)}"
        )
    ph, pw = geom.padding
    sh, sw = geom.stride
    ho, wo = out_hw
    n = yb.shape[0]
    # (N*Ho*Wo, C_out) @ (C_out, C_in*kh*kw)
    a = yb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
    cols = (a @ f.reshape(c_out, -1)).reshape(n, ho, wo, c_in, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((yb.shape[0], c_in, h + 2 * ph, w + 2 * pw))
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u : u + (ho - 1) * sh + 1 : sh, v : v + (wo - 1) * sw + 1 : sw] += cols[:, :, u, v]
    out = xp[:, :, ph : ph + h, pw : pw + w]
    return out[0] if single else np.ascontiguousarray(out)


def conv2d_filter_grad(x, grad_out, kernel_hw, geom: ConvGeometry | None = None) -> np.ndarray:
    """Gradient of ``sum(grad_out * conv2d(x, F))`` with respect to ``F``."""
    geom = geom or ConvGeometry()
    xb, _ = _batched(np.asarray(x, dtype=np.float64))
    gb, _ = _batched(np.asarray(grad_out, dtype=np.float64))
    kh, kw = kernel_hw
    ph, pw = geom.padding
    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _windows(xp, kh, kw, geom.stride, gb.shape[2:])
    n, c_in, ho, wo = cols.shape[:4]
    c_out = gb.shape[1]
    a = cols.transpose(1, 4, 5, 0, 2, 3).reshape(c_in * kh * kw, n * ho * wo)
    g2 = gb.transpose(1, 0, 2, 3).reshape(c_out, n * ho * wo)
    return (g2 @ a.T).reshape(c_out, c_in, kh, kw)


def pool_output_size(in_hw, window, stride) -> tuple[int, int]:
    out = []
    for n, p, s in zip(in_hw, window, stride):
        if p < 1 or s < 1 or p > n:
            raise GeometryError(f"pooling window {window} with stride {stride} does not fit input {tuple(in_hw)}")
        out.append((n - p) // s + 1)
    return out[0], out[1]


def maxpool2d(x, window, stride=None) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling. Returns the pooled tensor and, per output cell, the flat
    ``H*W`` index of the selected input element (first occurrence on ties)."""
    window = _pair(window)
    stride = _pair(stride) if stride is not None else window
    x = np.asarray(x, dtype=np.float64)
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    ho, wo = pool_output_size((h, w), window, stride)
    win = _windows(xb, window[0], window[1], stride, (ho, wo))
    flat = win.reshape(n, c, ho, wo, window[0] * window[1])
    k = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    du, dv = np.divmod(k, window[1])
    rows = np.arange(ho)[:, None] * stride[0] + du
    cols = np.arange(wo)[None, :] * stride[1] + dv
    idx = rows * w + cols
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(grad_out, indices, input_hw) -> np.ndarray:
    """Route each output gradient to its recorded argmax input cell."""
    g, single = _batched(np.asarray(grad_out, dtype=np.float64))
    idx, _ = _batched(np.asarray(indices))
    n, c = g.shape[:2]
    h, w = input_hw
    out = np.zeros((n, c, h * w))
    flat_idx = idx.reshape(n, c, -1)
    flat_g = g.reshape(n, c, -1)
    ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(out, (ni[..., None], ci[..., None], flat_idx), flat_g)
    out = out.reshape(n, c, h, w)
    return out[0] if single else out
