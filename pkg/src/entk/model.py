"""Small feedforward networks: declarative layer stack, flat parameters, forward pass."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import _kernels
from .errors import DimensionError, SpecError
from .rng import SplitMix64
from .tensor_core import matmul_nt, tanh


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = False

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise SpecError(f"dense extents must be >= 1: {self.text()}")

    def text(self):
        return f"dense {self.in_features} {self.out_features}" + (" bias" if self.bias else "")


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kh: int
    kw: int
    bias: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kh, self.kw) < 1:
            raise SpecError(f"conv2d extents must be >= 1: {self.text()}")

    def text(self):
        return (f"conv2d {self.in_channels} {self.out_channels} {self.kh} {self.kw}"
                + (" bias" if self.bias else ""))


@dataclass(frozen=True)
class Activation:
    fn: str

    def __post_init__(self):
        if self.fn not in ("relu", "tanh"):
            raise SpecError(f"unknown activation {self.fn!r}")

    def text(self):
        return self.fn


@dataclass(frozen=True)
class Flatten:
    def text(self):
        return "flatten"


LayerSpec = Union[Dense, Conv2d, Activation, Flatten]


def _describe(index, layer):
    return "input" if layer is None else f"layer {index} ({layer.text()})"


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not 1 <= len(self.input_shape) <= 3 or min(self.input_shape) < 1:
            raise SpecError(f"input shape must have 1..3 extents >= 1, got {self.input_shape}")
        if not self.layers:
            raise SpecError("model has no layers")
        shapes = []
        shape = self.input_shape
        prev = None
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, _describe(i - 1, prev), _describe(i, layer))
            shapes.append(shape)
            prev = layer
        if len(shape) != 1:
            raise SpecError(f"final {_describe(len(self.layers) - 1, prev)} produces shape "
                            f"{shape}; the model must end in a flat logit vector")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_count(self) -> int:
        return self.shapes[-1][0]

    @property
    def param_layer_positions(self) -> list[int]:
        """Positions in ``layers`` of the parameterized (Dense/Conv2d) layers."""
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, (Dense, Conv2d))]

    @property
    def n_param_layers(self) -> int:
        return len(self.param_layer_positions)

    def to_text(self) -> str:
        lines = ["input " + ",".join(str(d) for d in self.input_shape)]
        lines += [layer.text() for layer in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        return parse_spec(text)


def _out_shape(layer, shape, prev_name, name):
    def bad(expect):
        raise SpecError(f"{name} expects {expect} but {prev_name} produces shape {shape}")

    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_features:
            bad(f"input ({layer.in_features},)")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            bad(f"input ({layer.in_channels}, H, W)")
        ho, wo = shape[1] - layer.kh + 1, shape[2] - layer.kw + 1
        if ho < 1 or wo < 1:
            bad(f"spatial extents >= ({layer.kh}, {layer.kw})")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    return shape


def parse_spec(text: str) -> ModelSpec:
    """Parse the one-layer-per-line text format; the first line is ``input D1[,D2,D3]``."""
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith("input"):
        raise SpecError("model spec must start with an 'input D1[,D2,D3]' line")
    head = lines[0].split(None, 1)
    try:
        input_shape = tuple(int(d) for d in head[1].replace(" ", "").split(","))
    except (IndexError, ValueError):
        raise SpecError(f"bad input line: {lines[0]!r}") from None
    layers = []
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        kind, args = tok[0].lower(), tok[1:]
        bias = bool(args) and args[-1].lower() == "bias"
        if bias:
            args = args[:-1]
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise SpecError(f"line {lineno}: non-integer extent in {line!r}") from None
        if kind == "dense" and len(nums) == 2:
            layers.append(Dense(*nums, bias=bias))
        elif kind == "conv2d" and len(nums) == 4:
            layers.append(Conv2d(*nums, bias=bias))
        elif kind in ("relu", "tanh") and not nums and not bias:
            layers.append(Activation(kind))
        elif kind == "flatten" and not nums and not bias:
            layers.append(Flatten())
        else:
            raise SpecError(f"line {lineno}: cannot parse layer {line!r}")
    return ModelSpec(input_shape, tuple(layers))


def _tensor_shapes(layer) -> list[tuple]:
    if isinstance(layer, Dense):
        shapes = [(layer.out_features, layer.in_features)]
        out = layer.out_features
    else:
        shapes = [(layer.out_channels, layer.in_channels, layer.kh, layer.kw)]
        out = layer.out_channels
    if layer.bias:
        shapes.append((out,))
    return shapes


@dataclass(frozen=True)
class ParamVector:
    """Flat parameters plus bookkeeping.

    ``offsets`` holds one ``(start, length)`` per parameter tensor (weight,
    then bias) in layer order; ``layer_slices`` groups them per
    parameterized layer.
    """

    data: np.ndarray
    offsets: tuple
    layer_slices: tuple
    seed: int | None = None

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def layer_tensors(self, spec: ModelSpec, layer_index: int):
        """(weight, bias-or-None) views for parameterized layer ``layer_index``."""
        layer = spec.layers[spec.param_layer_positions[layer_index]]
        start, _ = self.layer_slices[layer_index]
        shapes = _tensor_shapes(layer)
        w_size = math.prod(shapes[0])
        w = self.data[start:start + w_size].reshape(shapes[0])
        b = self.data[start + w_size:start + w_size + shapes[1][0]] if layer.bias else None
        return w, b


def param_layout(spec: ModelSpec):
    offsets, slices = [], []
    pos = 0
    for i in spec.param_layer_positions:
        begin = pos
        for shape in _tensor_shapes(spec.layers[i]):
            n = math.prod(shape)
            offsets.append((pos, n))
            pos += n
        slices.append((begin, pos - begin))
    return tuple(offsets), tuple(slices), pos


def param_count(spec: ModelSpec) -> int:
    return param_layout(spec)[2]


def make_params(spec: ModelSpec, data, seed=None) -> ParamVector:
    offsets, slices, total = param_layout(spec)
    arr = np.array(data, dtype=np.float64).reshape(-1)
    if arr.shape[0] != total:
        raise DimensionError(f"parameter vector has {arr.shape[0]} entries, model needs {total}")
    arr.setflags(write=False)
    return ParamVector(arr, offsets, slices, seed)


def _feeds_relu(spec: ModelSpec, position: int) -> bool:
    for layer in spec.layers[position + 1:]:
        if isinstance(layer, Flatten):
            continue
        return isinstance(layer, Activation) and layer.fn == "relu"
    return False


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Gaussian weights with He (feeding relu) or LeCun scale; zero biases.

    Normals come from one SplitMix64 stream consumed layer by layer, row-major
    within each weight tensor. Biases consume nothing.
    """
    gen = SplitMix64(seed)
    offsets, slices, total = param_layout(spec)
    data = np.zeros(total)
    for k, pos in enumerate(spec.param_layer_positions):
        layer = spec.layers[pos]
        start, _ = slices[k]
        w_shape = _tensor_shapes(layer)[0]
        fan_in = math.prod(w_shape[1:])
        gain = 2.0 if _feeds_relu(spec, pos) else 1.0
        n = math.prod(w_shape)
        data[start:start + n] = gen.normal(n) * math.sqrt(gain / fan_in)
    return make_params(spec, data, seed)


def model_fingerprint(spec: ModelSpec, params: ParamVector) -> bytes:
    h = hashlib.sha256(spec.to_text().encode("utf-8"))
    h.update(np.ascontiguousarray(params.data, dtype="<f8").tobytes())
    return h.digest()


def check_batch(spec: ModelSpec, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != len(spec.input_shape) + 1 or tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match (B, *{spec.input_shape})")
    if x.shape[0] < 1:
        raise DimensionError("batch must contain at least one sample")
    return x


def conv_patches(x: np.ndarray, layer: Conv2d) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.empty((n, (h - layer.kh + 1) * (w - layer.kw + 1), c * layer.kh * layer.kw))
    return _kernels.im2col(x, layer.kh, layer.kw, out)


def forward_trace(spec: ModelSpec, params: ParamVector, x):
    """Run the network on a batch and keep what the backward pass needs.

    Returns ``(logits, trace)`` where ``trace[i]`` is the cached state of
    layer ``i``: the input matrix for Dense, im2col patches for Conv2d, the
    derivative mask for relu, the output for tanh, the input shape for Flatten.
    """
    a = check_batch(spec, x)
    n = a.shape[0]
    trace = []
    k = 0
    for layer in spec.layers:
        if isinstance(layer, Dense):
            w, b = params.layer_tensors(spec, k)
            k += 1
            trace.append(a)
            a = matmul_nt(a, w)
            if b is not None:
                a = a + b
        elif isinstance(layer, Conv2d):
            w, b = params.layer_tensors(spec, k)
            k += 1
            patches = conv_patches(a, layer)
            trace.append(patches)
            ho, wo = a.shape[2] - layer.kh + 1, a.shape[3] - layer.kw + 1
            y = matmul_nt(patches.reshape(-1, patches.shape[2]), w.reshape(w.shape[0], -1))
            a = np.ascontiguousarray(y.reshape(n, ho * wo, -1).transpose(0, 2, 1))
            if b is not None:
                a = a + b[:, None]
            a = a.reshape(n, layer.out_channels, ho, wo)
        elif isinstance(layer, Activation):
            if layer.fn == "relu":
                trace.append((a > 0.0).astype(np.float64))
                a = np.maximum(a, 0.0)
            else:
                a = tanh(a)
                trace.append(a)
        else:
            trace.append(a.shape)
            a = a.reshape(n, -1)
    return a, trace


def forward(spec: ModelSpec, params: ParamVector, x) -> np.ndarray:
    """Logits of shape (B, O)."""
    return forward_trace(spec, params, x)[0]


def data_fingerprint(x) -> bytes:
    """SHA-256 of the raw row-major little-endian float64 sample bytes."""
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).digest()
