"""Empirical neural tangent kernels for small numpy networks.

Exact full-NTK and pseudo-NTK computation by three interchangeable
algorithms, layerwise decomposition, a resumable tiled on-disk format,
kernel ridge regression and a benchmark harness.
"""
from .autodiff import finite_difference_jacobian, jacobian_batched, jacobian_naive, jvp, vjp
from .errors import EntkError
from .model import Activation, Conv2d, Dense, Flatten, ModelSpec, forward, init_params, make_params, parse_spec
from .ntk import (
    KernelMatrix,
    compute_kernel,
    ntk_jacobian_contraction,
    ntk_layerwise,
    ntk_naive,
    ntk_vector_products,
    pntk,
)
from .store import KernelHeader, KernelStore, TilePlan

__version__ = "0.1.0"

__all__ = [
    "Activation", "Conv2d", "Dense", "EntkError", "Flatten", "KernelHeader", "KernelMatrix", "KernelStore",
    "ModelSpec", "TilePlan", "compute_kernel", "finite_difference_jacobian", "forward", "init_params",
    "jacobian_batched", "jacobian_naive", "jvp", "make_params", "ntk_jacobian_contraction", "ntk_layerwise",
    "ntk_naive", "ntk_vector_products", "parse_spec", "pntk", "vjp",
]
