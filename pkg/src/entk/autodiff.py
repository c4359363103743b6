"""Reverse-mode VJPs, forward-mode JVPs and Jacobian builders over the model's forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels, accounting
from .errors import DimensionError
from .model import Activation, Conv2d, Dense, ModelSpec, ParamVector, check_batch, conv_patches, forward, forward_trace
from .tensor_core import matmul, matmul_nt, tanh

FD_STEP = 1e-5


def normalize_mask(spec: ModelSpec, layer_mask=None) -> tuple:
    """Sorted tuple of parameterized-layer indices; ``None`` or ``"all"`` selects every layer."""
    n = spec.n_param_layers
    if layer_mask is None or (isinstance(layer_mask, str) and layer_mask == "all"):
        return tuple(range(n))
    mask = tuple(sorted({int(i) for i in layer_mask}))
    if not mask:
        raise DimensionError("layer selection is empty")
    if mask[0] < 0 or mask[-1] >= n:
        raise DimensionError(f"layer indices {mask} out of range for {n} parameterized layers")
    return mask


def column_map(params: ParamVector, mask: tuple) -> dict:
    """layer index -> (first Jacobian column, parameter start, length)."""
    cols = {}
    c = 0
    for k in mask:
        start, length = params.layer_slices[k]
        cols[k] = (c, start, length)
        c += length
    return cols


def masked_size(params: ParamVector, mask: tuple) -> int:
    return sum(params.layer_slices[k][1] for k in mask)


@dataclass
class Jacobian:
    """values[b, o, c]: ∂f_o(x_b)/∂θ for the columns of the masked layers.

    ``columns`` maps each masked layer to (first column, parameter offset, length).
    """

    values: np.ndarray
    layer_mask: tuple
    columns: dict

    def full(self, n_params: int) -> np.ndarray:
        """Scatter back into a (B, O, P) array with zeros outside the mask."""
        b, o, _ = self.values.shape
        out = np.zeros((b, o, n_params))
        for c, start, length in self.columns.values():
            out[:, :, start:start + length] = self.values[:, :, c:c + length]
        return out


def pullback(spec: ModelSpec, params: ParamVector, trace, cotangents: np.ndarray,
             mask: tuple, out: np.ndarray) -> np.ndarray:
    """Backpropagate ``cotangents`` (N, R, O) and write parameter gradients into ``out`` (N, R, Pm).

    Row (n, r) of ``out`` receives the gradient of ⟨cotangents[n, r], f(x_n)⟩
    restricted to the masked layers. Propagation stops below the lowest
    masked layer.
    """
    cols = column_map(params, mask)
    positions = spec.param_layer_positions
    lowest = positions[mask[0]]
    delta = cotangents
    n, r = delta.shape[:2]
    k = spec.n_param_layers - 1
    for pos in range(len(spec.layers) - 1, lowest - 1, -1):
        layer = spec.layers[pos]
        cache = trace[pos]
        propagate = pos > lowest
        if isinstance(layer, Dense):
            w, b = params.layer_tensors(spec, k)
            if k in cols:
                c = cols[k][0]
                _kernels.outer_into(np.ascontiguousarray(delta), cache, out, c)
                if b is not None:
                    out[:, :, c + w.size:c + w.size + b.size] = delta
            if propagate:
                delta = matmul(delta.reshape(n * r, -1), w).reshape(n, r, -1)
            k -= 1
        elif isinstance(layer, Conv2d):
            w, b = params.layer_tensors(spec, k)
            co = layer.out_channels
            positions_len = cache.shape[1]
            d2 = np.ascontiguousarray(delta.reshape(n, r * co, positions_len))
            if k in cols:
                c = cols[k][0]
                ones = np.ones((positions_len, 1))
                for s in range(n):
                    gw = matmul(d2[s], cache[s])
                    out[s, :, c:c + w.size] = gw.reshape(r, w.size)
                    if b is not None:
                        out[s, :, c + w.size:c + w.size + co] = matmul(d2[s], ones).reshape(r, co)
            if propagate:
                cin = layer.in_channels
                h, wd = _conv_input_hw(spec, pos)
                rows = np.ascontiguousarray(d2.reshape(n * r, co, positions_len).transpose(0, 2, 1))
                dp = matmul(rows.reshape(-1, co), w.reshape(co, -1))
                dp = dp.reshape(n * r, positions_len, -1)
                dx = np.empty((n * r, cin, h, wd))
                _kernels.col2im(dp, cin, h, wd, layer.kh, layer.kw, dx)
                delta = dx.reshape(n, r, cin, h, wd)
            k -= 1
        elif isinstance(layer, Activation):
            if layer.fn == "relu":
                delta = delta * cache[:, None]
            else:
                delta = delta * (1.0 - cache * cache)[:, None]
        else:
            delta = delta.reshape(n, r, *cache[1:])
    return out


def _conv_input_hw(spec: ModelSpec, pos: int):
    shape = spec.input_shape if pos == 0 else spec.shapes[pos - 1]
    return shape[1], shape[2]


def _check_sample(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != spec.input_shape:
        raise DimensionError(f"sample shape {x.shape} does not match input shape {spec.input_shape}")
    return x[None]


def vjp(spec: ModelSpec, params: ParamVector, x, u) -> np.ndarray:
    """uᵀ J(x): gradient of ⟨u, f(x)⟩ with respect to all parameters."""
    xb = _check_sample(spec, x)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (spec.output_count,):
        raise DimensionError(f"cotangent has shape {u.shape}, expected ({spec.output_count},)")
    _, trace = forward_trace(spec, params, xb)
    out = np.empty((1, 1, params.size))
    pullback(spec, params, trace, u.reshape(1, 1, -1), normalize_mask(spec), out)
    return out[0, 0]


def _split_tangent(params: ParamVector, spec: ModelSpec, v: np.ndarray, k: int):
    tangent = ParamVector(v, params.offsets, params.layer_slices)
    return tangent.layer_tensors(spec, k)


def jvp_batch(spec: ModelSpec, params: ParamVector, x, v) -> np.ndarray:
    """J(x_b)·v for every sample of the batch, by propagating (primal, tangent) pairs."""
    a = check_batch(spec, x)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.size,):
        raise DimensionError(f"tangent has shape {v.shape}, expected ({params.size},)")
    n = a.shape[0]
    t = None
    k = 0
    for layer in spec.layers:
        if isinstance(layer, Dense):
            w, b = params.layer_tensors(spec, k)
            tw, tb = _split_tangent(params, spec, v, k)
            k += 1
            ty = matmul_nt(a, tw)
            if t is not None:
                ty += matmul_nt(t, w)
            a = matmul_nt(a, w)
            if b is not None:
                a = a + b
                ty += tb
            t = ty
        elif isinstance(layer, Conv2d):
            w, b = params.layer_tensors(spec, k)
            tw, tb = _split_tangent(params, spec, v, k)
            k += 1
            ho, wo = a.shape[2] - layer.kh + 1, a.shape[3] - layer.kw + 1
            co = layer.out_channels
            patches = conv_patches(a, layer).reshape(n * ho * wo, -1)
            ty = matmul_nt(patches, tw.reshape(co, -1))
            if t is not None:
                ty += matmul_nt(conv_patches(t, layer).reshape(n * ho * wo, -1), w.reshape(co, -1))
            y = matmul_nt(patches, w.reshape(co, -1))
            a = np.ascontiguousarray(y.reshape(n, ho * wo, co).transpose(0, 2, 1))
            t = np.ascontiguousarray(ty.reshape(n, ho * wo, co).transpose(0, 2, 1))
            if b is not None:
                a = a + b[:, None]
                t = t + tb[:, None]
            a = a.reshape(n, co, ho, wo)
            t = t.reshape(n, co, ho, wo)
        elif isinstance(layer, Activation):
            if layer.fn == "relu":
                mask = a > 0.0
                a = np.maximum(a, 0.0)
                if t is not None:
                    t = t * mask
            else:
                a = tanh(a)
                if t is not None:
                    t = t * (1.0 - a * a)
        else:
            a = a.reshape(n, -1)
            if t is not None:
                t = t.reshape(n, -1)
    if t is None:
        t = np.zeros_like(a)
    return t


def jvp(spec: ModelSpec, params: ParamVector, x, v) -> np.ndarray:
    """J(x)·v for a single sample; one forward-mode pass."""
    return jvp_batch(spec, params, _check_sample(spec, x), v)[0]


def _alloc_jacobian(b: int, o: int, cols: int) -> np.ndarray:
    out = np.empty((b, o, cols))
    accounting.alloc(out.nbytes)
    return out


def jacobian_naive(spec: ModelSpec, params: ParamVector, x, layer_mask=None) -> Jacobian:
    """Baseline: B·O independent VJPs against basis cotangents, each with its own forward pass."""
    xb = check_batch(spec, x)
    mask = normalize_mask(spec, layer_mask)
    cols = column_map(params, mask)
    o = spec.output_count
    values = _alloc_jacobian(xb.shape[0], o, masked_size(params, mask))
    basis = np.eye(o)
    with accounting.held(params.size * 8):
        for i in range(xb.shape[0]):
            for j in range(o):
                g = vjp(spec, params, xb[i], basis[j])
                for c, start, length in cols.values():
                    values[i, j, c:c + length] = g[start:start + length]
    return Jacobian(values, mask, cols)


def jacobian_batched(spec: ModelSpec, params: ParamVector, x, layer_mask=None) -> Jacobian:
    """Shared forward trace; all B·O cotangent rows pulled back in one sweep.

    Bit-identical to :func:`jacobian_naive`.
    """
    xb = check_batch(spec, x)
    mask = normalize_mask(spec, layer_mask)
    o = spec.output_count
    n = xb.shape[0]
    _, trace = forward_trace(spec, params, xb)
    values = _alloc_jacobian(n, o, masked_size(params, mask))
    cot = np.broadcast_to(np.eye(o), (n, o, o))
    pullback(spec, params, trace, cot, mask, values)
    return Jacobian(values, mask, column_map(params, mask))


def scalar_head_gradients(spec: ModelSpec, params: ParamVector, x, cotangent, layer_mask=None) -> np.ndarray:
    """(B, Pm) gradients of ⟨cotangent, f(x_b)⟩, one pullback row per sample."""
    xb = check_batch(spec, x)
    mask = normalize_mask(spec, layer_mask)
    n = xb.shape[0]
    _, trace = forward_trace(spec, params, xb)
    values = _alloc_jacobian(n, 1, masked_size(params, mask))
    cot = np.broadcast_to(np.asarray(cotangent, dtype=np.float64), (n, 1, spec.output_count))
    pullback(spec, params, trace, cot, mask, values)
    return values.reshape(n, -1)


def finite_difference_jacobian(spec: ModelSpec, params: ParamVector, x, h: float = FD_STEP,
                               layer_mask=None) -> Jacobian:
    """Central differences (f(θ + h e_p) − f(θ − h e_p)) / 2h, one column per parameter."""
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    xb = check_batch(spec, x)
    mask = normalize_mask(spec, layer_mask)
    cols = column_map(params, mask)
    values = np.empty((xb.shape[0], spec.output_count, masked_size(params, mask)))
    theta = np.array(params.data)
    for c, start, length in cols.values():
        for q in range(length):
            p = start + q
            saved = theta[p]
            theta[p] = saved + h
            plus = forward(spec, _with(params, theta), xb)
            theta[p] = saved - h
            minus = forward(spec, _with(params, theta), xb)
            theta[p] = saved
            values[:, :, c + q] = (plus - minus) / (2.0 * h)
    return Jacobian(values, mask, cols)


def _with(params: ParamVector, data: np.ndarray) -> ParamVector:
    return ParamVector(data, params.offsets, params.layer_slices, params.seed)
