"""Dataset sources: the synthetic two-blob generator and CSV files."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SpecError
from .rng import SplitMix64


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray | None = None
    source: str = ""

    @property
    def size(self) -> int:
        return self.x.shape[0]


def blobs(n: int, dim: int, sep: float, seed: int = 0) -> Dataset:
    """Two unit-variance Gaussian blobs centred at ±sep/2 on the first axis.

    Sample i has label i % 2 and consumes the next ``dim`` normals of one
    SplitMix64 stream, so ``blobs(n)`` is a prefix of ``blobs(m)`` for n <= m.
    """
    if n < 1 or dim < 1:
        raise SpecError(f"blobs needs n >= 1 and dim >= 1, got n={n} dim={dim}")
    x = SplitMix64(seed).normal(n * dim).reshape(n, dim)
    labels = np.arange(n) % 2
    x[:, 0] += np.where(labels == 1, sep / 2.0, -sep / 2.0)
    return Dataset(x, labels, f"blobs:{n},{dim},{sep},{seed}")


def split(data: Dataset, n_first: int):
    """Split into the first ``n_first`` samples and the rest."""
    lab = data.labels
    return (Dataset(data.x[:n_first], None if lab is None else lab[:n_first], data.source + "[train]"),
            Dataset(data.x[n_first:], None if lab is None else lab[n_first:], data.source + "[test]"))


def load_csv(path, input_shape=None) -> Dataset:
    """One sample per line, comma-separated floats.

    With ``input_shape`` given, a line with exactly one extra column carries an
    integer label in its last field; samples are reshaped to ``input_shape``.
    """
    rows = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    labels = None
    if input_shape is not None:
        width = math.prod(input_shape)
        if rows.shape[1] == width + 1:
            raw = rows[:, -1]
            if not np.all(raw == np.round(raw)):
                raise DimensionError(f"{path}: label column holds non-integer values")
            labels = raw.astype(np.int64)
            rows = rows[:, :-1]
        elif rows.shape[1] != width:
            raise DimensionError(f"{path}: {rows.shape[1]} columns, model input needs {width} (or {width + 1} "
                                 "with a label)")
        rows = rows.reshape((rows.shape[0],) + tuple(input_shape))
    return Dataset(np.ascontiguousarray(rows), labels, f"csv:{path}")


def load_labels(path) -> np.ndarray:
    """Labels CSV: one integer class per line."""
    raw = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=1).reshape(-1)
    if not np.all(raw == np.round(raw)) or np.any(raw < 0):
        raise DimensionError(f"{path}: labels must be non-negative integers")
    return raw.astype(np.int64)


def parse_source(text: str):
    """``blobs:B,d,sep[,seed]`` or ``csv:PATH`` -> (kind, args)."""
    kind, _, rest = text.partition(":")
    if kind == "blobs":
        parts = [p.strip() for p in rest.split(",")]
        if len(parts) not in (3, 4):
            raise SpecError(f"blobs source must be blobs:B,d,sep[,seed], got {text!r}")
        try:
            args = (int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3]) if len(parts) == 4 else 0)
        except ValueError:
            raise SpecError(f"cannot parse blobs source {text!r}") from None
        return "blobs", args
    if kind == "csv" and rest:
        return "csv", (rest,)
    raise SpecError(f"unknown data source {text!r}; expected blobs:B,d,sep[,seed] or csv:PATH")


def load_source(text: str, input_shape=None) -> Dataset:
    kind, args = parse_source(text)
    if kind == "blobs":
        return blobs(*args)
    return load_csv(args[0], input_shape)


def source_input_dim(text: str):
    """Feature count a source implies before any model is known (None for CSV)."""
    kind, args = parse_source(text)
    return args[1] if kind == "blobs" else None
