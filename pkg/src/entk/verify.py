"""Invariant checks and the pNTK-vs-NTK width sweep.

Each check returns a :class:`CheckResult`; ``run_suite`` runs them all and the
CLI prints one ``CHECK name PASS|FAIL detail`` line per result.
"""
from __future__ import annotations

import io
import math
import os
import statistics
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import finite_difference_jacobian, jacobian_batched, jacobian_naive
from .data import blobs
from .model import Activation, Conv2d, Dense, Flatten, ModelSpec, forward_trace, init_params, make_params, parse_spec
from .ntk import ALGORITHMS, KernelMatrix, compute_kernel, kernel_values, ntk_layerwise
from .rng import SplitMix64
from .scheduler import KernelTask, compute_to_file, resume_file
from .store import KernelStore
from .tensor_core import asymmetry, is_psd, kron_identity, relative_frobenius, sym_eig_topk

FD_RTOL = 1e-5
AGREEMENT_RTOL = 1e-9
ADDITIVITY_RTOL = 1e-10
ANALYTIC_RTOL = 1e-12
SYMMETRY_RTOL = 1e-10
PSD_RTOL = 1e-8
SWEEP_WIDTHS = (16, 64, 256)
SWEEP_SEEDS = 5
SWEEP_BATCH = 16
SWEEP_OUTPUTS = 10
SWEEP_INPUT_DIM = 8


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"CHECK {self.name} {'PASS' if self.passed else 'FAIL'} {self.detail}".rstrip()


@dataclass
class ReferenceModel:
    name: str
    spec: ModelSpec
    params: object
    x: np.ndarray

    @property
    def multi_layer(self) -> bool:
        return self.spec.n_param_layers > 1


def kink_free_inputs(spec: ModelSpec, params, n: int, margin: float = 1e-2, seed: int = 0,
                     max_draws: int = 100_000) -> np.ndarray:
    """``n`` Gaussian samples whose relu pre-activations all satisfy |z| >= margin.

    Finite differences across a relu kink are meaningless; these inputs keep
    every unit on one side of it under small parameter perturbations.
    """
    gen = SplitMix64(seed)
    width = math.prod(spec.input_shape)
    relu_at = [i for i, layer in enumerate(spec.layers) if isinstance(layer, Activation) and layer.fn == "relu"]
    kept = []
    draws = 0
    while len(kept) < n:
        if draws >= max_draws:
            raise RuntimeError(f"found only {len(kept)} kink-free samples in {max_draws} draws")
        x = gen.normal(width).reshape((1,) + spec.input_shape)
        draws += 1
        if all(np.min(np.abs(_pre_activation(spec, params, x, i))) >= margin for i in relu_at):
            kept.append(x[0])
    return np.stack(kept)


def _pre_activation(spec, params, x, position):
    """Input of layer ``position`` (flattened per sample), from a forward pass over the prefix."""
    if position == 0:
        return x.reshape(x.shape[0], -1)
    prefix = spec.layers[:position]
    if len(spec.shapes[position - 1]) > 1:
        prefix = prefix + (Flatten(),)
    n_param = sum(isinstance(layer, (Dense, Conv2d)) for layer in prefix)
    end = sum(params.layer_slices[k][1] for k in range(n_param))
    sub = ModelSpec(spec.input_shape, prefix)
    return forward_trace(sub, make_params(sub, params.data[:end]), x)[0]


def reference_models(n: int = 6) -> list:
    """The fixed architectures every check runs on."""
    out = []

    def add(name, text, seed, kink_free=False):
        spec = parse_spec(text)
        params = init_params(spec, seed)
        if kink_free:
            x = kink_free_inputs(spec, params, n, seed=seed)
        else:
            x = SplitMix64(seed + 1000).normal(n * math.prod(spec.input_shape)).reshape((n,) + spec.input_shape)
        out.append(ReferenceModel(name, spec, params, x))

    add("linear", "input 5\ndense 5 4\n", 1)
    add("tanh_mlp", "input 5\ndense 5 16 bias\ntanh\ndense 16 4\n", 2)
    add("relu_mlp", "input 5\ndense 5 12 bias\nrelu\ndense 12 12 bias\nrelu\ndense 12 3\n", 3, kink_free=True)
    add("conv", "input 2,6,6\nconv2d 2 3 3 3 bias\ntanh\nflatten\ndense 48 3 bias\n", 4)
    add("scalar", "input 1\ndense 1 1\n", 5)
    return out


def linear_model(d: int = 5, o: int = 4, n: int = 6, seed: int = 11) -> ReferenceModel:
    spec = parse_spec(f"input {d}\ndense {d} {o}\n")
    return ReferenceModel("linear", spec, init_params(spec, seed), SplitMix64(seed).normal(n * d).reshape(n, d))


# -- individual checks ---------------------------------------------------------------


def check_fd_oracle(models) -> CheckResult:
    worst = 0.0
    parts = []
    for m in models:
        err = relative_frobenius(jacobian_batched(m.spec, m.params, m.x).values,
                                 finite_difference_jacobian(m.spec, m.params, m.x).values)
        worst = max(worst, err)
        parts.append(f"{m.name}={err:.2e}")
    return CheckResult("fd_oracle", worst <= FD_RTOL, " ".join(parts))


def check_naive_batched(models) -> CheckResult:
    bad = [m.name for m in models if not np.array_equal(jacobian_naive(m.spec, m.params, m.x).values,
                                                         jacobian_batched(m.spec, m.params, m.x).values)]
    return CheckResult("naive_batched_bitexact", not bad, "mismatch: " + ",".join(bad) if bad else "all identical")


def check_cross_algorithm(models) -> CheckResult:
    worst = 0.0
    parts = []
    for m in models:
        half = m.x.shape[0] // 2
        for x2 in (None, m.x[:half]):
            ref = kernel_values(m.spec, m.params, m.x, x2, algorithm="contraction")
            for alg in ("naive", "nvp"):
                err = relative_frobenius(kernel_values(m.spec, m.params, m.x, x2, algorithm=alg), ref)
                worst = max(worst, err)
        parts.append(m.name)
    return CheckResult("cross_algorithm", worst <= AGREEMENT_RTOL, f"max_rel={worst:.2e} over {','.join(parts)}")


def check_additivity(models) -> CheckResult:
    worst = 0.0
    names = []
    for m in models:
        if not m.multi_layer:
            continue
        for kind in ("ntk", "pntk"):
            full = compute_kernel(m.spec, m.params, m.x, kind=kind).values
            total = sum(k.values for _, k in ntk_layerwise(m.spec, m.params, m.x, kind=kind))
            worst = max(worst, relative_frobenius(total, full))
        names.append(m.name)
    return CheckResult("layer_additivity", worst <= ADDITIVITY_RTOL, f"max_rel={worst:.2e} over {','.join(names)}")


def kron_relative_error(theta, ptheta, output_count: int, ordering: str = "sample-major") -> float:
    """‖Θ − pΘ⊗I‖F / ‖Θ‖F; ``ordering="logit-major"`` builds I⊗pΘ instead (wrong for our layout)."""
    if ordering == "sample-major":
        approx = kron_identity(ptheta, output_count)
    elif ordering == "logit-major":
        approx = np.kron(np.eye(output_count), ptheta)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    return relative_frobenius(approx, theta)


def check_pntk_block(model: ReferenceModel | None = None) -> CheckResult:
    """On a bias-free linear model Θ = pΘ ⊗ I exactly (bit-exact for ``first``)."""
    m = model or linear_model()
    o = m.spec.output_count
    theta = kernel_values(m.spec, m.params, m.x, kind="ntk")
    gram = m.x @ m.x.T
    first = kernel_values(m.spec, m.params, m.x, kind="pntk", mode="first")
    summed = kernel_values(m.spec, m.params, m.x, kind="pntk", mode="sum")
    exact = np.array_equal(kron_identity(first, o), theta)
    e_sum = kron_relative_error(theta, summed, o)
    e_gram = max(relative_frobenius(first, gram), relative_frobenius(summed, gram),
                 relative_frobenius(theta, kron_identity(gram, o)))
    ok = exact and e_sum <= ANALYTIC_RTOL and e_gram <= ANALYTIC_RTOL
    return CheckResult("pntk_block_relation", ok,
                       f"first_exact={str(exact).lower()} sum_rel={e_sum:.2e} vs_xxT={e_gram:.2e}")


def kernel_well_formed(values) -> tuple:
    """(passes, asymmetry, psd) under the symmetry and PSD tolerances."""
    asym = asymmetry(values)
    psd = is_psd(values, PSD_RTOL)
    return asym <= SYMMETRY_RTOL and psd, asym, psd


def check_symmetry_psd(models, corrupt_tile: bool = False) -> CheckResult:
    """Symmetric kernels from the tiled file path; ``corrupt_tile`` perturbs one stored entry first."""
    worst = 0.0
    failures = []
    with tempfile.TemporaryDirectory() as tmp:
        for m in models:
            for kind in ("ntk", "pntk"):
                path = os.path.join(tmp, f"{m.name}_{kind}.entk")
                task = KernelTask(m.spec, m.params, m.x, kind=kind)
                rows = task.extents[0]
                store, _ = compute_to_file(path, task, chunk=max(1, rows // 2), durable=False)
                if corrupt_tile and rows > 1:
                    tile = store.read_tile(0).copy()
                    tile[-1, 0] += 1.0 + abs(tile).max()
                    store.write_tile(0, tile)
                values = store.assemble()
                store.close()
                ok, asym, psd = kernel_well_formed(values)
                worst = max(worst, asym)
                if not ok:
                    failures.append(f"{m.name}/{kind}(asym={asym:.1e},psd={str(psd).lower()})")
    detail = f"max_asym={worst:.2e}" + (" failing: " + " ".join(failures) if failures else "")
    return CheckResult("symmetry_psd", not failures, detail)


# -- width sweep --------------------------------------------------------------------


def sweep_model(width: int, input_dim: int = SWEEP_INPUT_DIM, outputs: int = SWEEP_OUTPUTS) -> ModelSpec:
    return ModelSpec((input_dim,), (Dense(input_dim, width, bias=True), Activation("tanh"),
                                    Dense(width, outputs)))


@dataclass
class ConvergenceReport:
    widths: list
    seeds: list
    rel_frobenius: list            # per width, per seed
    rel_lambda_max: list
    mode: str = "sum"
    warnings: list = field(default_factory=list)

    @property
    def median_frobenius(self) -> list:
        return [statistics.median(v) for v in self.rel_frobenius]

    @property
    def median_lambda_max(self) -> list:
        return [statistics.median(v) for v in self.rel_lambda_max]

    @property
    def passed(self) -> bool:
        return _strictly_decreasing(self.median_frobenius) and _strictly_decreasing(self.median_lambda_max)

    def table(self) -> str:
        lines = [f"{'width':>6} {'median_rel_frobenius':>22} {'median_rel_lambda_max':>22}"]
        for w, f, lam in zip(self.widths, self.median_frobenius, self.median_lambda_max):
            lines.append(f"{w:>6} {f:>22.6e} {lam:>22.6e}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("width,seed,rel_frobenius,rel_lambda_max\n")
        for i, w in enumerate(self.widths):
            for j, s in enumerate(self.seeds):
                buf.write(f"{w},{s},{self.rel_frobenius[i][j]!r},{self.rel_lambda_max[i][j]!r}\n")
        return buf.getvalue()


def _strictly_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def convergence_errors(spec: ModelSpec, params, x, mode: str = "sum", algorithm: str = "contraction"):
    """(relative Frobenius error of pΘ⊗I, relative top-eigenvalue error) against the full NTK."""
    theta = compute_kernel(spec, params, x, kind="ntk", algorithm=algorithm).values
    ptheta = compute_kernel(spec, params, x, kind="pntk", algorithm=algorithm, mode=mode).values
    rel_f = kron_relative_error(theta, ptheta, spec.output_count)
    lam = float(sym_eig_topk(theta, 1)[0])
    plam = float(sym_eig_topk(ptheta, 1)[0])
    return rel_f, abs(lam - plam) / lam


def width_sweep(widths=SWEEP_WIDTHS, seeds=SWEEP_SEEDS, n: int = SWEEP_BATCH, mode: str = "sum",
                model_for_width=sweep_model, data_seed: int = 0, sep: float = 4.0) -> ConvergenceReport:
    widths = list(widths)
    if any(b <= a for a, b in zip(widths, widths[1:])):
        raise ValueError(f"widths must be strictly ascending, got {widths}")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    probe = model_for_width(widths[0])
    x = blobs(n, probe.input_shape[0], sep, data_seed).x
    rf, rl = [], []
    for w in widths:
        spec = model_for_width(w)
        row_f, row_l = [], []
        for s in seed_list:
            f, lam = convergence_errors(spec, init_params(spec, s), x, mode)
            row_f.append(f)
            row_l.append(lam)
        rf.append(row_f)
        rl.append(row_l)
    report = ConvergenceReport(widths, seed_list, rf, rl, mode)
    if len(widths) < 2:
        msg = "single-width sweep: the decrease test is vacuous"
        report.warnings.append(msg)
        warnings.warn(msg, stacklevel=2)
    return report


def check_width_sweep(report: ConvergenceReport | None = None) -> CheckResult:
    report = report or width_sweep()
    f = " ".join(f"{v:.3e}" for v in report.median_frobenius)
    lam = " ".join(f"{v:.3e}" for v in report.median_lambda_max)
    return CheckResult("width_sweep", report.passed,
                       f"widths={','.join(map(str, report.widths))} rel_frobenius={f} rel_lambda_max={lam}")


# -- durability harnesses -----------------------------------------------------------


class InjectedStop(Exception):
    pass


def interrupted_then_resumed(path, task: KernelTask, stop_after: int, chunk: int, workers: int = 1) -> bytes:
    """Stop the run after ``stop_after`` commits, resume it, and return the final file bytes."""
    def stop(done, _job):
        if done >= stop_after:
            raise InjectedStop(f"stopped after {done} tiles")

    try:
        store, _ = compute_to_file(path, task, chunk=chunk, workers=workers, on_commit=stop, overwrite=True)
        store.close()
    except InjectedStop:
        pass
    store, _ = resume_file(path, task.spec, task.params, task.x_rows, None if task.symmetric else task.x_cols,
                           workers=workers)
    store.close()
    with open(path, "rb") as fh:
        return fh.read()


def run_suite(models=None, corrupt_tile: bool = False, sweep: bool = True, sweep_report=None) -> list:
    models = models if models is not None else reference_models()
    results = [
        check_fd_oracle(models),
        check_naive_batched(models),
        check_cross_algorithm(models),
        check_additivity(models),
        check_pntk_block(),
        check_symmetry_psd(models, corrupt_tile=corrupt_tile),
    ]
    if sweep:
        results.append(check_width_sweep(sweep_report))
    return results

