"""Timing and peak-intermediate comparison of the kernel algorithms over a model/batch grid."""
from __future__ import annotations

import csv
import io
import math
import os
import statistics
import tempfile
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import accounting
from .autodiff import jacobian_batched, jacobian_naive
from .errors import NumericalCheckError
from .model import Activation, Conv2d, Dense, Flatten, ModelSpec, init_params, param_count
from .ntk import ALGORITHMS, estimate_peak_bytes, kernel_values
from .rng import SplitMix64
from .scheduler import KernelTask, compute_to_file
from .tensor_core import relative_frobenius

CSV_COLUMNS = ("arch", "B", "O", "P", "chunk", "algorithm", "workers", "repeats",
               "wall_seconds_median", "peak_intermediate_bytes", "error")
AGREEMENT_RTOL = 1e-9
DEFAULT_REPEATS = 5


@dataclass
class BenchRecord:
    arch: str
    B: int
    O: int
    P: int
    chunk: int
    algorithm: str
    workers: int
    repeats: int
    wall_seconds_median: float
    peak_intermediate_bytes: int
    error: str = ""
    timings: tuple = field(default=(), compare=False, repr=False)

    def __eq__(self, other):
        if not isinstance(other, BenchRecord):
            return NotImplemented
        for f in fields(self):
            if not f.compare:
                continue
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
                continue
            if a != b:
                return False
        return True


def build_arch(arch: str, output_count: int) -> ModelSpec:
    """Architecture ids.

    ``mlp:D,H1,...,Hk``      dense tanh stack, input D, hidden widths H1..Hk, then O logits
    ``relu-mlp:D,H1,...,Hk`` same with relu
    ``conv:C,H,W,F,K``       conv2d C->F with KxK kernel, relu, flatten, dense to O
    ``linear:D``             one dense layer D -> O
    """
    kind, _, rest = arch.partition(":")
    try:
        nums = [int(v) for v in rest.split(",") if v]
    except ValueError:
        raise ValueError(f"bad architecture id {arch!r}") from None
    o = output_count
    if kind in ("mlp", "relu-mlp") and len(nums) >= 2:
        fn = "tanh" if kind == "mlp" else "relu"
        layers = []
        for a, b in zip(nums, nums[1:]):
            layers += [Dense(a, b), Activation(fn)]
        return ModelSpec((nums[0],), tuple(layers) + (Dense(nums[-1], o),))
    if kind == "conv" and len(nums) == 5:
        c, h, w, f, k = nums
        return ModelSpec((c, h, w), (Conv2d(c, f, k, k), Activation("relu"), Flatten(),
                                     Dense(f * (h - k + 1) * (w - k + 1), o)))
    if kind == "linear" and len(nums) == 1:
        return ModelSpec((nums[0],), (Dense(nums[0], o),))
    raise ValueError(f"bad architecture id {arch!r}")


def bench_inputs(spec: ModelSpec, n: int, seed: int = 0) -> np.ndarray:
    return SplitMix64(seed).normal(n * math.prod(spec.input_shape)).reshape((n,) + spec.input_shape)


def time_callable(fn, repeats: int = DEFAULT_REPEATS, warmup: int = 1):
    """(median seconds, all timings) over ``repeats`` runs after ``warmup`` untimed runs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - t0)
    return statistics.median(timings), tuple(timings)


def measure_peak(fn) -> int:
    with accounting.track() as meter:
        fn()
    return meter.peak


def _kernel_runner(spec, params, x, kind, algorithm, workers, chunk):
    rows = x.shape[0] * (spec.output_count if kind == "ntk" else 1)
    if workers == 1 and (chunk is None or chunk >= rows):
        return (lambda: kernel_values(spec, params, x, kind=kind, algorithm=algorithm)), rows

    def tiled():
        with tempfile.TemporaryDirectory() as tmp:
            store, _ = compute_to_file(os.path.join(tmp, "bench.entk"),
                                       KernelTask(spec, params, x, kind=kind, algorithm=algorithm),
                                       chunk=chunk or rows, workers=workers, durable=False)
            store.close()

    return tiled, chunk or rows


def correctness_gate(spec, params, x, kind, algorithms, rtol=AGREEMENT_RTOL):
    """Compute every algorithm's kernel once; abort if any disagrees with the first."""
    ref = None
    for alg in algorithms:
        values = kernel_values(spec, params, x, kind=kind, algorithm=alg)
        if ref is None:
            ref = (alg, values)
            continue
        err = relative_frobenius(values, ref[1])
        if not err <= rtol:
            raise NumericalCheckError(f"{alg} kernel differs from {ref[0]} by {err:.3e} relative (limit {rtol})")


def sweep(archs, batch_sizes, output_counts, algorithms=ALGORITHMS, repeats=DEFAULT_REPEATS, workers=1,
          chunk=None, kind="ntk", budget_bytes=None, seed=0, progress=None) -> list:
    """One record per (arch, B, O, algorithm), in grid order.

    Points whose estimated intermediates exceed ``budget_bytes`` are recorded
    with an ``error`` and no timing. A correctness gate runs before timing at
    every grid point; disagreement aborts the sweep.
    """
    records = []
    for arch in archs:
        for o in output_counts:
            spec = build_arch(arch, o)
            params = init_params(spec, seed)
            p = param_count(spec)
            for b in batch_sizes:
                x = bench_inputs(spec, b, seed)
                runnable = []
                for alg in algorithms:
                    est = estimate_peak_bytes(spec, params, b, b, kind, alg, None, True)
                    if budget_bytes is not None and est > budget_bytes:
                        records.append(BenchRecord(arch, b, o, p, chunk or 0, alg, workers, 0, math.nan, est,
                                                   f"skipped: estimated {est} bytes over budget {budget_bytes}"))
                    else:
                        runnable.append(alg)
                if len(runnable) > 1:
                    correctness_gate(spec, params, x, kind, runnable)
                for alg in runnable:
                    fn, used_chunk = _kernel_runner(spec, params, x, kind, alg, workers, chunk)
                    peak = measure_peak(lambda: kernel_values(spec, params, x, kind=kind, algorithm=alg))
                    try:
                        median, timings = time_callable(fn, repeats)
                        err = ""
                    except Exception as exc:  # recorded, not fatal
                        median, timings, err = math.nan, (), f"{type(exc).__name__}: {exc}"
                    records.append(BenchRecord(arch, b, o, p, used_chunk, alg, workers, repeats, median, peak,
                                               err, timings))
                    if progress is not None:
                        progress(records[-1])
    return records


def emit_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([r.arch, r.B, r.O, r.P, r.chunk, r.algorithm, r.workers, r.repeats,
                         repr(float(r.wall_seconds_median)), r.peak_intermediate_bytes, r.error])
    return buf.getvalue()


def parse_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected bench CSV header {header}")
    out = []
    for row in reader:
        arch, b, o, p, chunk, alg, workers, repeats, wall, peak, err = row
        out.append(BenchRecord(arch, int(b), int(o), int(p), int(chunk), alg, int(workers), int(repeats),
                               float(wall), int(peak), err))
    return out


@dataclass
class Recommendation:
    winners: dict          # (arch, B, O, P) -> algorithm
    boundaries: list       # (arch, axis, fixed value, boundary value, previous winner, new winner)

    def table(self) -> str:
        lines = [f"{'arch':<24} {'B':>6} {'O':>6} {'P':>10}  best"]
        for (arch, b, o, p), alg in self.winners.items():
            lines.append(f"{arch:<24} {b:>6} {o:>6} {p:>10}  {alg}")
        for arch, axis, fixed, at, old, new in self.boundaries:
            other = "B" if axis == "O" else "O"
            lines.append(f"flip {arch} {other}={fixed}: {old} -> {new} at {axis}={at}")
        return "\n".join(lines)


def recommend(records) -> Recommendation:
    """Fastest algorithm per grid point and the points along O and B where the winner changes."""
    usable = [r for r in records if not r.error and not math.isnan(r.wall_seconds_median)]
    if not usable:
        raise ValueError("no timed bench records to recommend from")
    best = {}
    for r in usable:
        key = (r.arch, r.B, r.O, r.P)
        if key not in best or r.wall_seconds_median < best[key].wall_seconds_median:
            best[key] = r
    winners = {k: best[k].algorithm for k in sorted(best)}
    boundaries = []
    for axis, pos, fixed_pos in (("O", 2, 1), ("B", 1, 2)):
        groups = {}
        for key in winners:
            groups.setdefault((key[0], key[fixed_pos]), []).append(key)
        for (arch, fixed), keys in sorted(groups.items()):
            keys.sort(key=lambda k: k[pos])
            for prev, cur in zip(keys, keys[1:]):
                if winners[prev] != winners[cur]:
                    boundaries.append((arch, axis, fixed, cur[pos], winners[prev], winners[cur]))
    return Recommendation(winners, boundaries)


@dataclass
class SpeedupResult:
    naive_seconds: float
    batched_seconds: float
    naive_timings: tuple
    batched_timings: tuple

    @property
    def ratio(self) -> float:
        return self.naive_seconds / self.batched_seconds


def jacobian_speedup(spec: ModelSpec, params, x, repeats: int = DEFAULT_REPEATS) -> SpeedupResult:
    """Median wall time of the per-logit VJP Jacobian against the batched pullback."""
    naive, tn = time_callable(lambda: jacobian_naive(spec, params, x), repeats)
    batched, tb = time_callable(lambda: jacobian_batched(spec, params, x), repeats)
    return SpeedupResult(naive, batched, tn, tb)
