"""Model JSON documents, two-column CSV files and the synthetic 1-D dataset.

Floats are written with ``repr``, the shortest decimal that round-trips, so
load(save(net)) restores every 64-bit value exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
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

FORMAT_VERSION = 1
LAYOUT = "channels_first_row_major"


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.shape[:1] != self.targets.shape[:1] or len(self.inputs) < 1:
            raise DimensionError(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} need equal non-zero length"
            )

    def __len__(self):
        return len(self.inputs)


def synthetic_fn(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sin(x) + np.cos(19 * x) / 5


def gen_synthetic(n: int = 1000, lo: float = -5.0, hi: float = 5.0, seed: int = 0) -> Dataset:
    """``n`` uniform draws on ``[lo, hi]`` labelled with ``sin(x) + cos(19x)/5``; shapes ``(n, 1)``."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid range [{lo}, {hi}]")
    x = np.random.default_rng(seed).uniform(lo, hi, size=n)
    return Dataset(x[:, None], synthetic_fn(x)[:, None])


# ---------------------------------------------------------------------------
# CSV


def write_predictions_csv(xs, ys, path) -> None:
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.shape != ys.shape:
        raise DimensionError(f"x and y lengths differ: {xs.size} vs {ys.size}")
    with open(path, "w", newline="") as fh:
        for x, y in zip(xs.tolist(), ys.tolist()):
            fh.write(f"{x!r},{y!r}\n")


def read_xy_csv(path) -> Dataset:
    xs, ys = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                xs.append(float(row[0]))
                ys.append(float(row[1]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not a number: {','.join(row)!r}") from None
    if not xs:
        raise FormatError(f"{path}: no rows")
    return Dataset(np.array(xs)[:, None], np.array(ys)[:, None])


# ---------------------------------------------------------------------------
# model documents


def _layer_record(layer: Layer) -> dict:
    rec: dict = {"kind": layer.kind}
    rec.update(layer.hyperparameters())
    if isinstance(layer, Residual):
        rec["inner"] = [_layer_record(l) for l in layer.inner]
        return rec
    params = {k: v.tolist() for k, v in layer.params.items()}
    if isinstance(layer, BatchNorm):
        params["running_mean"] = layer.running_mean.tolist()
        params["running_var"] = layer.running_var.tolist()
    if params:
        rec["params"] = params
    return rec


def _array(params: dict, key: str, kind: str) -> np.ndarray:
    if key not in params:
        raise FormatError(f"{kind} layer is missing parameter {key!r}")
    try:
        return np.array(params[key], dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{kind} parameter {key!r} is not a rectangular number array") from None


def _build_layer(rec) -> Layer:
    if not isinstance(rec, dict) or "kind" not in rec:
        raise FormatError(f"layer record must be an object with a 'kind', got {rec!r:.80}")
    kind = rec["kind"]
    p = rec.get("params", {})
    try:
        if kind == "dense":
            return Dense(_array(p, "W", kind), _array(p, "b", kind))
        if kind == "conv2d":
            return Conv2D(_array(p, "F", kind), _array(p, "b", kind), rec.get("stride", 1), rec.get("padding", 0))
        if kind == "relu":
            return ReLU()
        if kind == "softmax":
            return Softmax()
        if kind == "maxpool":
            return MaxPool(tuple(rec["window"]), tuple(rec["stride"]))
        if kind == "dropout":
            return Dropout(rec["retain"])
        if kind == "batchnorm":
            return BatchNorm(
                _array(p, "gamma", kind),
                _array(p, "beta", kind),
                _array(p, "running_mean", kind),
                _array(p, "running_var", kind),
                rec["epsilon"],
                rec["momentum"],
            )
        if kind == "residual":
            return Residual([_build_layer(r) for r in rec["inner"]])
    except KeyError as exc:
        raise FormatError(f"{kind} layer record is missing {exc}") from None
    except (DimensionError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid {kind} layer: {exc}") from None
    raise FormatError(f"unknown layer kind {kind!r}")


def model_to_document(net: Network) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layout": LAYOUT,
        "input_shape": list(net.input_shape),
        "loss": net.loss,
        "layers": [_layer_record(l) for l in net.layers],
    }


def model_from_document(doc) -> Network:
    if not isinstance(doc, dict):
        raise FormatError("model document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    if doc.get("layout", LAYOUT) != LAYOUT:
        raise FormatError(f"unsupported layout {doc.get('layout')!r}")
    for key in ("input_shape", "layers"):
        if key not in doc:
            raise FormatError(f"model document is missing {key!r}")
    layers = [_build_layer(r) for r in doc["layers"]]
    try:
        return Network(layers, doc["input_shape"], doc.get("loss", "mse"))
    except (DimensionError, ValueError, TypeError) as exc:
        raise FormatError(f"inconsistent model: {exc}") from None


def dumps_model(net: Network) -> str:
    return json.dumps(model_to_document(net), indent=1, allow_nan=False) + "\n"


def save_model(net: Network, path) -> None:
    try:
        text = dumps_model(net)
    except ValueError as exc:
        raise FormatError(f"model contains non-finite values: {exc}") from None
    Path(path).write_text(text)


def load_model(path) -> Network:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON: {exc}") from None
    return model_from_document(doc)
