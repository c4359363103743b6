"""Kernel ridge regression on NTK / pNTK kernels, plus a gradient-descent baseline network."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import normalize_mask, pullback
from .errors import DimensionError, IntegrityError, NotPositiveDefiniteError
from .model import ModelSpec, ParamVector, check_batch, forward, forward_trace, make_params
from .ntk import KernelMatrix
from .tensor_core import check_symmetric, cholesky_solve, matmul


@dataclass
class KrrModel:
    """Dual coefficients ``alpha`` (B_train × O) of a ridge-regularized kernel fit."""

    alpha: np.ndarray
    lam: float
    kind: str
    output_count: int
    model_fingerprint: bytes | None = None
    data_fingerprint: bytes | None = None


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DimensionError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    y = np.zeros((labels.size, classes))
    y[np.arange(labels.size), labels] = 1.0
    return y


def _unwrap(kernel):
    if isinstance(kernel, KernelMatrix):
        return kernel.values, kernel
    return np.asarray(kernel, dtype=np.float64), None


def krr_fit(kernel, targets, lam: float = 0.0, classes=None) -> KrrModel:
    """alpha = (K + λI)⁻¹ Y by Cholesky.

    ``targets`` is a (B, O) matrix, or a label vector expanded to one-hot
    over ``classes`` (default: the kernel's logit count, else max label + 1).
    A full-NTK kernel of size B·O regresses the stacked targets.
    """
    if not lam >= 0.0:
        raise ValueError(f"ridge strength must be >= 0, got {lam}")
    k, meta = _unwrap(kernel)
    check_symmetric(k)
    kind = meta.kind if meta is not None else "pntk"
    o = meta.output_count if meta is not None else None
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        labels = np.asarray(targets, dtype=np.int64)
        y = one_hot(labels, classes or o or int(labels.max()) + 1)
    if kind == "ntk":
        b = k.shape[0] // meta.output_count
        if y.shape != (b, meta.output_count):
            raise DimensionError(f"full-NTK fit of {b} samples needs ({b}, {meta.output_count}) targets, got {y.shape}")
        rhs = y.reshape(-1, 1)
    else:
        if y.shape[0] != k.shape[0]:
            raise DimensionError(f"kernel has {k.shape[0]} rows but targets have {y.shape[0]}")
        rhs = y
    system = k + lam * np.eye(k.shape[0]) if lam > 0 else k
    try:
        alpha = cholesky_solve(system, rhs)
    except NotPositiveDefiniteError as exc:
        hint = "; use lambda > 0" if lam == 0 else ""
        raise NotPositiveDefiniteError(f"kernel ridge system is not positive definite ({exc}){hint}",
                                       pivot=exc.pivot) from None
    alpha = alpha.reshape(y.shape)
    return KrrModel(alpha, float(lam), kind, y.shape[1],
                    None if meta is None else meta.model_fingerprint,
                    None if meta is None else meta.data_fingerprints[0])


def krr_predict(model: KrrModel, cross_kernel):
    """(scores, labels) for a B_test × B_train cross kernel; ties go to the lowest class."""
    kc, meta = _unwrap(cross_kernel)
    if meta is not None:
        if model.model_fingerprint is not None and meta.model_fingerprint != model.model_fingerprint:
            raise IntegrityError("cross kernel model fingerprint differs from the training kernel's")
        if model.data_fingerprint is not None and meta.data_fingerprints[1] != model.data_fingerprint:
            raise IntegrityError("cross kernel column data fingerprint differs from the training data's")
    if model.kind == "ntk":
        o = model.output_count
        scores = matmul(kc, model.alpha.reshape(-1, 1)).reshape(-1, o)
    else:
        if kc.shape[1] != model.alpha.shape[0]:
            raise DimensionError(f"cross kernel has {kc.shape[1]} columns, model has {model.alpha.shape[0]} "
                                 "training points")
        scores = matmul(kc, model.alpha)
    return scores, np.argmax(scores, axis=1)


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    return float(np.mean(pred == labels)) if labels.size else math.nan


def train_gd(spec: ModelSpec, params: ParamVector, x, labels, steps: int = 200, lr: float = 0.1):
    """Full-batch gradient descent on mean softmax cross-entropy.

    Returns ``(trained params, per-step losses)``.
    """
    x = check_batch(spec, x)
    y = one_hot(labels, spec.output_count)
    n = x.shape[0]
    mask = normalize_mask(spec)
    theta = np.array(params.data)
    losses = []
    grads = np.empty((n, 1, params.size))
    for _ in range(steps):
        current = make_params(spec, theta, params.seed)
        logits, trace = forward_trace(spec, current, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        prob = np.exp(shifted)
        prob /= prob.sum(axis=1, keepdims=True)
        losses.append(float(-np.mean(np.sum(y * (shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))),
                                             axis=1))))
        cot = ((prob - y) / n)[:, None, :]
        pullback(spec, current, trace, cot, mask, grads)
        theta -= lr * grads[:, 0, :].sum(axis=0)
    return make_params(spec, theta, params.seed), losses


def predict_labels(spec: ModelSpec, params: ParamVector, x) -> np.ndarray:
    return np.argmax(forward(spec, params, x), axis=1)
