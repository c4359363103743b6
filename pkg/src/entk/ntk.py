"""Empirical NTK and pseudo-NTK computations.

Three interchangeable algorithms share one value contract:

``naive``
    Jacobians from per-logit VJPs (each with its own forward pass), then a Gram product.
``contraction``
    Jacobians from one batched pullback, then ``J1 @ J2.T``.
``nvp``
    Column by column: ``v = vjp(x_j, e_o')`` then ``Θ[:, (j, o')] = jvp(X1, v)``.
    The B×O×P Jacobian is never materialized.

Full-NTK kernels are indexed sample-major, logit-minor: ``(i, o) -> i*O + o``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from .autodiff import (
    jacobian_batched,
    jacobian_naive,
    jvp_batch,
    masked_size,
    normalize_mask,
    scalar_head_gradients,
    vjp,
)
from .errors import BudgetError, DimensionError
from .model import ModelSpec, ParamVector, check_batch, data_fingerprint, model_fingerprint
from .tensor_core import asymmetry, gram_upper, is_psd, matmul, matmul_nt

ALGORITHMS = ("naive", "contraction", "nvp")
KINDS = ("ntk", "pntk")
PNTK_MODES = ("sum", "first")
FLOAT_BYTES = 8


@dataclass
class KernelMatrix:
    values: np.ndarray
    kind: str
    algorithm: str
    layer_mask: tuple
    model_fingerprint: bytes
    data_fingerprints: tuple
    symmetric: bool
    output_count: int
    pntk_mode: str = "sum"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape

    def well_formed(self, sym_rtol=1e-10, psd_rtol=1e-8) -> bool:
        if not self.symmetric:
            return True
        return asymmetry(self.values) <= sym_rtol and is_psd(self.values, psd_rtol)


def scalar_cotangent(output_count: int, mode: str) -> np.ndarray:
    """Cotangent of the scalarized head g: O^(-1/2)·1 for ``sum``, e_0 for ``first``."""
    if mode == "sum":
        return np.full(output_count, 1.0 / math.sqrt(output_count))
    if mode == "first":
        u = np.zeros(output_count)
        u[0] = 1.0
        return u
    raise ValueError(f"unknown pNTK mode {mode!r}; expected one of {PNTK_MODES}")


def estimate_peak_bytes(spec: ModelSpec, params: ParamVector, b1: int, b2: int, kind: str,
                        algorithm: str, layer_mask=None, symmetric=False) -> int:
    """Bytes of Jacobian/gradient buffers the algorithm will request (outputs excluded)."""
    mask = normalize_mask(spec, layer_mask)
    pm = masked_size(params, mask)
    rows = 1 if kind == "pntk" else spec.output_count
    if algorithm == "nvp":
        return FLOAT_BYTES * (params.size + b1 * rows)
    sides = b1 if symmetric else b1 + b2
    extra = params.size if algorithm == "naive" else 0
    return FLOAT_BYTES * (sides * rows * pm + extra)


def _check_budget(estimate: int, budget_bytes):
    if budget_bytes is not None and estimate > budget_bytes:
        raise BudgetError(
            f"estimated peak intermediate {estimate} bytes exceeds budget {budget_bytes} bytes; "
            "use the chunked path with a smaller chunk"
        )


def _mirror_upper(values: np.ndarray) -> np.ndarray:
    low = np.tril_indices(values.shape[0], -1)
    values[low] = values.T[low]
    return values


def kernel_values(spec: ModelSpec, params: ParamVector, x1, x2=None, *, kind="ntk",
                  algorithm="contraction", mode="sum", layer_mask=None) -> np.ndarray:
    """Raw kernel block. ``x2=None`` means the symmetric case X2 = X1.

    Symmetric results take their lower triangle from the upper one, so every
    algorithm returns an exactly symmetric matrix.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KINDS}")
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    symmetric = x2 is None
    x1 = check_batch(spec, x1)
    x2 = x1 if symmetric else check_batch(spec, x2)
    mask = normalize_mask(spec, layer_mask)
    if kind == "ntk":
        values = _ntk_values(spec, params, x1, x2, algorithm, mask, symmetric)
    else:
        values = _pntk_values(spec, params, x1, x2, algorithm, scalar_cotangent(spec.output_count, mode),
                              mask, symmetric)
    return _mirror_upper(values) if symmetric else values


def _gram_of(f, x1, x2, symmetric):
    g1 = f(x1)
    if symmetric:
        out = gram_upper(g1)
        accounting.free(g1.nbytes)
        return out
    g2 = f(x2)
    out = matmul_nt(g1, g2)
    accounting.free(g1.nbytes + g2.nbytes)
    return out


def _ntk_values(spec, params, x1, x2, algorithm, mask, symmetric):
    o = spec.output_count
    if algorithm == "nvp":
        return _nvp_columns(spec, params, x1, x2, np.eye(o), mask)
    builder = jacobian_naive if algorithm == "naive" else jacobian_batched

    def flat_jacobian(x):
        jac = builder(spec, params, x, mask).values
        return jac.reshape(x.shape[0] * o, -1)

    return _gram_of(flat_jacobian, x1, x2, symmetric)


def _pntk_values(spec, params, x1, x2, algorithm, u, mask, symmetric):
    if algorithm == "nvp":
        return _nvp_columns(spec, params, x1, x2, u[None, :], mask, project=u)
    if algorithm == "naive":
        def grads(x):
            out = np.empty((x.shape[0], masked_size(params, mask)))
            accounting.alloc(out.nbytes)
            with accounting.held(params.size * FLOAT_BYTES):
                for i in range(x.shape[0]):
                    out[i] = _restrict(vjp(spec, params, x[i], u), params, mask)
            return out
    else:
        def grads(x):
            return scalar_head_gradients(spec, params, x, u, mask)

    return _gram_of(grads, x1, x2, symmetric)


def _restrict(g: np.ndarray, params: ParamVector, mask: tuple) -> np.ndarray:
    return np.concatenate([g[s:s + n] for s, n in (params.layer_slices[k] for k in mask)])


def _zero_outside(g: np.ndarray, params: ParamVector, mask: tuple) -> np.ndarray:
    if len(mask) == len(params.layer_slices):
        return g
    keep = np.zeros_like(g)
    for k in mask:
        s, n = params.layer_slices[k]
        keep[s:s + n] = g[s:s + n]
    return keep


def _nvp_columns(spec, params, x1, x2, cotangents, mask, project=None):
    """Kernel columns from a VJP on the column sample and a batched JVP over x1.

    ``cotangents`` has one row per column logit; ``project`` scalarizes the
    JVP output for the pNTK.
    """
    rows_per = spec.output_count if project is None else 1
    cols_per = cotangents.shape[0]
    out = np.empty((x1.shape[0] * rows_per, x2.shape[0] * cols_per))
    with accounting.held(FLOAT_BYTES * (params.size + x1.shape[0] * rows_per)):
        for j in range(x2.shape[0]):
            for q in range(cols_per):
                v = _zero_outside(vjp(spec, params, x2[j], cotangents[q]), params, mask)
                col = jvp_batch(spec, params, x1, v)
                if project is not None:
                    col = matmul(col, project[:, None])
                out[:, j * cols_per + q] = col.reshape(-1)
    return out


def _wrap(values, spec, params, x1, x2, kind, algorithm, mode, mask) -> KernelMatrix:
    symmetric = x2 is None
    fp1 = data_fingerprint(x1)
    fp2 = fp1 if symmetric else data_fingerprint(x2)
    return KernelMatrix(values, kind, algorithm, mask, model_fingerprint(spec, params), (fp1, fp2),
                        symmetric, spec.output_count, mode)


def compute_kernel(spec: ModelSpec, params: ParamVector, x1, x2=None, *, kind="ntk",
                   algorithm="contraction", mode="sum", layer_mask=None, budget_bytes=None) -> KernelMatrix:
    """Monolithic kernel with metadata; fails fast if the intermediates exceed the budget."""
    x1 = check_batch(spec, x1)
    if x2 is not None:
        x2 = check_batch(spec, x2)
    mask = normalize_mask(spec, layer_mask)
    b2 = x1.shape[0] if x2 is None else x2.shape[0]
    _check_budget(estimate_peak_bytes(spec, params, x1.shape[0], b2, kind, algorithm, mask, x2 is None),
                  budget_bytes)
    values = kernel_values(spec, params, x1, x2, kind=kind, algorithm=algorithm, mode=mode, layer_mask=mask)
    return _wrap(values, spec, params, x1, x2, kind, algorithm, mode, mask)


def ntk_naive(spec, params, x1, x2=None, layer_mask=None, budget_bytes=None) -> KernelMatrix:
    return compute_kernel(spec, params, x1, x2, kind="ntk", algorithm="naive",
                          layer_mask=layer_mask, budget_bytes=budget_bytes)


def ntk_jacobian_contraction(spec, params, x1, x2=None, layer_mask=None, budget_bytes=None) -> KernelMatrix:
    """Θ = J1 · J2ᵀ with both Jacobians from the batched pullback."""
    return compute_kernel(spec, params, x1, x2, kind="ntk", algorithm="contraction",
                          layer_mask=layer_mask, budget_bytes=budget_bytes)


def ntk_vector_products(spec, params, x1, x2=None, layer_mask=None, budget_bytes=None) -> KernelMatrix:
    """Θ column by column via VJP then JVP; peak intermediate is P + B1·O floats."""
    return compute_kernel(spec, params, x1, x2, kind="ntk", algorithm="nvp",
                          layer_mask=layer_mask, budget_bytes=budget_bytes)


def pntk(spec, params, x1, x2=None, mode="sum", layer_mask=None, algorithm="contraction",
         budget_bytes=None) -> KernelMatrix:
    """B1×B2 kernel of the scalar head g (sum of logits scaled by O^(-1/2), or the first logit)."""
    return compute_kernel(spec, params, x1, x2, kind="pntk", algorithm=algorithm, mode=mode,
                          layer_mask=layer_mask, budget_bytes=budget_bytes)


def ntk_layerwise(spec, params, x1, x2=None, kind="ntk", mode="sum", algorithm="contraction",
                  layers=None, budget_bytes=None) -> list:
    """One kernel per parameterized layer; the kernels sum to the unmasked kernel."""
    selected = normalize_mask(spec, layers)
    if not selected:
        raise DimensionError("layer selection is empty")
    return [(k, compute_kernel(spec, params, x1, x2, kind=kind, algorithm=algorithm, mode=mode,
                               layer_mask=(k,), budget_bytes=budget_bytes))
            for k in selected]
