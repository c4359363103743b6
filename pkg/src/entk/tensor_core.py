"""Dense float64 arithmetic and the small linear-algebra routines built on it.

Tensors are plain ``numpy.ndarray`` objects in float64. The products here
never reorder their summations, so a row of a batched product is bit-identical
to the same row computed on its own.
"""
from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .errors import ConvergenceError, DimensionError, NotPositiveDefiniteError, SymmetryError

MAX_POWER_ITERATIONS = 10_000
MAX_RANK = 4
EIG_SPARE_COLUMNS = 24


def as_tensor(a, rank=None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array and validate its shape."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0 or arr.ndim > MAX_RANK:
        raise DimensionError(f"tensor rank must be 1..{MAX_RANK}, got shape {arr.shape}")
    if rank is not None and arr.ndim != rank:
        raise DimensionError(f"expected rank-{rank} tensor, got shape {arr.shape}")
    if 0 in arr.shape:
        raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a, b) -> np.ndarray:
    """a @ b with ascending-k accumulation per entry."""
    a = _as_matrix(a)
    b = _as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]))
    return _kernels.matmul_into(a, b, out)


def matmul_nt(a, b) -> np.ndarray:
    """a @ b.T with ascending-k accumulation per entry (the Gram product)."""
    a = _as_matrix(a)
    b = _as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_nt inner extents differ: {a.shape} x {b.shape}ᵀ")
    out = np.empty((a.shape[0], b.shape[0]))
    return _kernels.matmul_nt_into(a, b, out)


def gram_upper(a) -> np.ndarray:
    """Symmetric a @ a.T computing only the upper triangle; the lower one is mirrored.

    Every entry equals the corresponding entry of ``matmul_nt(a, a)`` bit for bit.
    """
    a = _as_matrix(a)
    out = np.zeros((a.shape[0], a.shape[0]))
    _kernels.gram_upper_into(a, out)
    low = np.tril_indices(a.shape[0], -1)
    out[low] = out.T[low]
    return out


def _as_matrix(a) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {arr.shape}")
    return arr


def tanh(x) -> np.ndarray:
    # Scalar libm per element: numpy's SIMD tanh may round differently in
    # vector bodies and tails, which would break batch independence.
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    _kernels.tanh_into(x.reshape(-1), out.reshape(-1))
    return out


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return math.sqrt(float(np.sum(a * a)))


def relative_frobenius(a, b) -> float:
    """‖a − b‖F / ‖b‖F, with 0/0 defined as 0."""
    denom = frobenius_norm(b)
    num = frobenius_norm(np.asarray(a) - np.asarray(b))
    if denom == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / denom


def asymmetry(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    return relative_frobenius(a, a.T) if frobenius_norm(a) > 0 else 0.0


def check_symmetric(a, rtol=1e-9):
    err = asymmetry(a)
    if err > rtol:
        raise SymmetryError(f"matrix is not symmetric: relative asymmetry {err:.3e} > {rtol:.1e}")


def kron_identity(p, count: int) -> np.ndarray:
    """p ⊗ I_count in sample-major ordering: index (i, o) -> i*count + o."""
    return np.kron(np.asarray(p, dtype=np.float64), np.eye(count))


def sym_eig_topk(a, k: int, tol: float = 1e-10, return_vectors: bool = False,
                 max_iter: int = MAX_POWER_ITERATIONS):
    """Largest ``k`` eigenvalues of a symmetric matrix, in descending order.

    Block power iteration on the shifted matrix ``a + σI`` (σ from the
    Gershgorin lower bound plus a small margin, so "largest" means
    algebraically largest), with a Rayleigh-Ritz step each sweep. The block
    carries spare columns so that tight eigenvalue clusters, which stall a
    single power vector, still converge. Leading Ritz pairs with
    ``‖a v − λ v‖ ≤ tol·‖a‖F`` are locked and deflated by rank-1 subtraction.
    """
    a = _as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not 1 <= k <= n:
        raise DimensionError(f"k must be in [1, {n}], got {k}")
    check_symmetric(a)
    a = 0.5 * (a + a.T)
    scale = frobenius_norm(a)
    if scale == 0.0:
        values = np.zeros(k)
        vectors = np.eye(n)[:, :k]
        return (values, vectors) if return_vectors else values

    radius = np.sum(np.abs(a), axis=1) - np.abs(np.diag(a))
    shift = max(0.0, -float(np.min(np.diag(a) - radius))) + 1e-3 * scale
    shifted = a + shift * np.eye(n)
    threshold = tol * scale

    from .rng import SplitMix64

    block = min(n, max(2 * k, k + EIG_SPARE_COLUMNS))
    q, _ = np.linalg.qr(SplitMix64(0x5EED).normal(n * block).reshape(n, block))
    locked_vals = []
    locked = np.empty((n, 0))
    worst = math.inf
    for _ in range(max_iter):
        z = shifted @ q
        z -= locked @ (locked.T @ z)
        q, _ = np.linalg.qr(z)
        q -= locked @ (locked.T @ q)
        q, _ = np.linalg.qr(q)
        ritz, coeff = np.linalg.eigh(q.T @ a @ q)
        order = np.argsort(-ritz, kind="stable")
        ritz, x = ritz[order], q @ coeff[:, order]
        residuals = np.linalg.norm(a @ x - x * ritz, axis=0)
        need = k - len(locked_vals)
        done = 0
        while done < min(need, x.shape[1]) and residuals[done] <= threshold:
            done += 1
        worst = float(residuals[min(done, need - 1)]) if done < need else 0.0
        if done:
            for j in range(done):
                shifted -= (ritz[j] + shift) * np.outer(x[:, j], x[:, j])
            locked_vals.extend(float(v) for v in ritz[:done])
            locked = np.hstack([locked, x[:, :done]])
            if len(locked_vals) == k:
                break
        q = x[:, done:]
        if q.shape[1] < k - len(locked_vals):
            raise ConvergenceError("eigen block exhausted before all requested pairs converged", residual=worst)
    else:
        raise ConvergenceError(
            f"power iteration found {len(locked_vals)} of {k} eigenpairs in {max_iter} iterations "
            f"(residual {worst:.3e}, target {threshold:.3e})",
            residual=worst,
        )
    values = np.array(locked_vals)
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = locked[:, order]
    return (values, vectors) if return_vectors else values


def cholesky(a) -> np.ndarray:
    """Lower-triangular L with L Lᵀ = a."""
    a = _as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    check_symmetric(a)
    low = np.zeros_like(a)
    for j in range(n):
        row = low[j, :j]
        pivot = a[j, j] - float(row @ row)
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite: pivot {j} is {pivot:.3e}", pivot=j
            )
        d = math.sqrt(pivot)
        low[j, j] = d
        if j + 1 < n:
            low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ row) / d
    return low


def cholesky_solve(a, rhs) -> np.ndarray:
    """Solve a·x = rhs for SPD ``a`` by Cholesky factorization and two triangular sweeps."""
    rhs = np.asarray(rhs, dtype=np.float64)
    vector = rhs.ndim == 1
    rhs2 = rhs.reshape(-1, 1) if vector else _as_matrix(rhs)
    low = cholesky(a)
    n = low.shape[0]
    if rhs2.shape[0] != n:
        raise DimensionError(f"rhs rows {rhs2.shape} do not match system {low.shape}")
    z = np.empty_like(rhs2)
    for i in range(n):
        z[i] = (rhs2[i] - low[i, :i] @ z[:i]) / low[i, i]
    x = np.empty_like(rhs2)
    for i in range(n - 1, -1, -1):
        x[i] = (z[i] - low[i + 1:, i] @ x[i + 1:]) / low[i, i]
    return x.reshape(-1) if vector else x


def is_psd(a, rtol: float = 1e-8) -> bool:
    """True when λ_min(a) ≥ −rtol·λ_max(a), tested by factorizing a + rtol·λ_max·I."""
    a = _as_matrix(a)
    sym = 0.5 * (a + a.T)
    lam_max = float(sym_eig_topk(sym, 1)[0])
    if lam_max <= 0.0:
        return lam_max == 0.0 and frobenius_norm(sym) == 0.0
    try:
        cholesky(sym + rtol * lam_max * np.eye(a.shape[0]))
    except NotPositiveDefiniteError:
        return False
    return True
