"""Tile-parallel kernel computation into an ENTK file.

Workers pull tile jobs from one ascending queue and hand finished tiles to a
single committing writer (the calling thread). Each tile is computed from its
own samples with a fixed summation order, so the file bytes do not depend on
the worker count or on commit order.
"""
from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from .autodiff import normalize_mask
from .errors import BudgetError, DimensionError, IntegrityError
from .model import ModelSpec, ParamVector, check_batch, data_fingerprint, model_fingerprint
from .ntk import ALGORITHMS, KINDS, PNTK_MODES, estimate_peak_bytes, kernel_values
from .store import DEFAULT_CHUNK, KernelHeader, KernelStore, TilePlan

WORKERS_ENV = "ENTK_WORKERS"


@dataclass(frozen=True)
class TileJob:
    """One tile: half-open kernel index ranges plus the sample ranges that cover them."""

    tile_id: int
    rows: tuple
    cols: tuple
    row_samples: tuple
    col_samples: tuple
    diagonal: bool
    algorithm: str
    layer_mask: tuple


@dataclass
class RunReport:
    tiles_computed: int
    wall_seconds: float
    per_worker: list
    peak_estimated_bytes: int
    peak_measured_bytes: int = 0
    workers: int = 1
    notes: list = field(default_factory=list)


def resolve_workers(workers=None) -> int:
    """Explicit count, else ``ENTK_WORKERS``, else 1."""
    if workers is None:
        env = os.environ.get(WORKERS_ENV, "").strip()
        workers = int(env) if env else 1
    workers = int(workers)
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    return workers


def _sample_range(lo: int, hi: int, per: int):
    return lo // per, -(-hi // per)


def plan_jobs(plan: TilePlan, rows_per_sample: int, algorithm: str, layer_mask: tuple, tile_ids=None) -> list:
    """Jobs for ``tile_ids`` (default: every computable tile), ascending.

    When the chunk is not a multiple of the logit count a tile covers partial
    samples; its sample range is widened to whole samples and the extra
    kernel rows are sliced away after computation.
    """
    ids = plan.computable_ids() if tile_ids is None else sorted(tile_ids)
    jobs = []
    for t in ids:
        if not plan.computable(t):
            raise DimensionError(f"tile {t} is not computable in this plan")
        r0, r1, c0, c1 = plan.rect(t)
        jobs.append(TileJob(t, (r0, r1), (c0, c1), _sample_range(r0, r1, rows_per_sample),
                            _sample_range(c0, c1, rows_per_sample), plan.is_diagonal(t), algorithm,
                            tuple(layer_mask)))
    return jobs


class KernelTask:
    """Computes tile values for one (model, data, kernel settings) combination."""

    def __init__(self, spec: ModelSpec, params: ParamVector, x_rows, x_cols=None, *, kind="ntk",
                 algorithm="contraction", mode="sum", layer_mask=None):
        if kind not in KINDS:
            raise ValueError(f"unknown kernel kind {kind!r}")
        if algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algorithm!r}")
        if mode not in PNTK_MODES:
            raise ValueError(f"unknown pNTK mode {mode!r}")
        self.spec = spec
        self.params = params
        self.symmetric = x_cols is None
        self.x_rows = check_batch(spec, x_rows)
        self.x_cols = self.x_rows if self.symmetric else check_batch(spec, x_cols)
        self.kind = kind
        self.algorithm = algorithm
        self.mode = mode
        self.layer_mask = normalize_mask(spec, layer_mask)
        self.rows_per_sample = spec.output_count if kind == "ntk" else 1

    @property
    def extents(self):
        return self.x_rows.shape[0] * self.rows_per_sample, self.x_cols.shape[0] * self.rows_per_sample

    def header(self, chunk=DEFAULT_CHUNK, dtype="f64") -> KernelHeader:
        rows, cols = self.extents
        fp_rows = data_fingerprint(self.x_rows)
        return KernelHeader(
            kind=self.kind, algorithm=self.algorithm, output_count=self.spec.output_count,
            rows=rows, cols=cols, chunk=chunk, symmetric=self.symmetric, layer_mask=self.layer_mask,
            model_fingerprint=model_fingerprint(self.spec, self.params),
            data_fingerprint_rows=fp_rows,
            data_fingerprint_cols=fp_rows if self.symmetric else data_fingerprint(self.x_cols),
            pntk_mode=self.mode, dtype=dtype,
        )

    def jobs(self, plan: TilePlan, tile_ids=None) -> list:
        return plan_jobs(plan, self.rows_per_sample, self.algorithm, self.layer_mask, tile_ids)

    def peak_bytes(self, job: TileJob) -> int:
        b1 = job.row_samples[1] - job.row_samples[0]
        b2 = job.col_samples[1] - job.col_samples[0]
        shared = job.diagonal and job.row_samples == job.col_samples
        return estimate_peak_bytes(self.spec, self.params, b1, b2, self.kind, self.algorithm,
                                   self.layer_mask, shared)

    def __call__(self, job: TileJob) -> np.ndarray:
        s0, s1 = job.row_samples
        q0, q1 = job.col_samples
        x1 = self.x_rows[s0:s1]
        shared = job.diagonal and job.row_samples == job.col_samples
        x2 = None if shared else self.x_cols[q0:q1]
        block = kernel_values(self.spec, self.params, x1, x2, kind=self.kind, algorithm=self.algorithm,
                              mode=self.mode, layer_mask=self.layer_mask)
        per = self.rows_per_sample
        r0, r1 = job.rows[0] - s0 * per, job.rows[1] - s0 * per
        c0, c1 = job.cols[0] - q0 * per, job.cols[1] - q0 * per
        return np.ascontiguousarray(block[r0:r1, c0:c1])


def _feasible_workers(peak: int, workers: int, budget_bytes, notes: list) -> int:
    if budget_bytes is None:
        return workers
    if peak > budget_bytes:
        raise BudgetError(f"a tile needs an estimated {peak} bytes of intermediates, over the budget of "
                          f"{budget_bytes} bytes even with one worker; use a smaller --chunk or --batch-size")
    fit = max(1, budget_bytes // peak)
    if fit < workers:
        notes.append(f"workers reduced from {workers} to {fit} so concurrent tiles fit the budget")
        return int(fit)
    return workers


def run(plan: TilePlan, jobs: list, task, store: KernelStore, workers: int = 1, budget_bytes=None,
        on_commit=None) -> RunReport:
    """Compute every job and commit it to ``store``.

    ``task(job)`` returns the tile values and ``task.peak_bytes(job)`` its
    estimated intermediate size. ``on_commit(tiles_so_far, job)`` runs after
    each durable commit. A failing worker aborts the run; tiles already
    committed stay complete on disk.
    """
    workers = resolve_workers(workers)
    notes = []
    peak = max((task.peak_bytes(j) for j in jobs), default=0)
    if jobs:
        workers = _feasible_workers(peak, workers, budget_bytes, notes)
    workers = min(workers, max(1, len(jobs)))
    per_worker = [0] * workers
    measured = [0] * workers
    committed = 0
    start = time.perf_counter()

    def compute(job, w):
        with accounting.track() as meter:
            values = task(job)
        measured[w] = max(measured[w], meter.peak)
        return values

    def commit(job, values, w):
        nonlocal committed
        store.write_tile(job.tile_id, values)
        per_worker[w] += 1
        committed += 1
        if on_commit is not None:
            on_commit(committed, job)

    if workers == 1:
        for job in jobs:
            commit(job, compute(job, 0), 0)
    else:
        todo = queue.Queue()
        for job in jobs:
            todo.put(job)
        done = queue.Queue()
        stop = threading.Event()

        def worker(w):
            while not stop.is_set():
                try:
                    job = todo.get_nowait()
                except queue.Empty:
                    return
                try:
                    done.put((job, compute(job, w), w, None))
                except BaseException as exc:  # reported to the committer
                    done.put((job, None, w, exc))
                    return

        threads = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(workers)]
        for th in threads:
            th.start()
        try:
            for _ in range(len(jobs)):
                job, values, w, exc = done.get()
                if exc is not None:
                    raise exc
                commit(job, values, w)
        finally:
            stop.set()
            for th in threads:
                th.join()

    return RunReport(committed, time.perf_counter() - start, per_worker, peak, max(measured, default=0),
                     workers, notes)


# -- file-level operations -------------------------------------------------------


def default_chunk(rows_per_sample: int, batch_size=None, chunk=None) -> int:
    """``chunk`` wins; otherwise ``batch_size`` samples per tile edge; otherwise the store default."""
    if chunk is not None:
        value = int(chunk)
    elif batch_size is not None:
        value = int(batch_size) * rows_per_sample
    else:
        value = DEFAULT_CHUNK
    if value < 1:
        raise ValueError(f"chunk must be >= 1, got {value}")
    return value


def compute_to_file(path, task: KernelTask, *, chunk=DEFAULT_CHUNK, dtype="f64", workers=1,
                    budget_bytes=None, overwrite=False, on_commit=None, durable=True):
    """Create ``path`` and fill every tile. Returns ``(store, report)``; the store is open."""
    header = task.header(chunk, dtype)
    plan = header.plan
    jobs = task.jobs(plan)
    # fail on the budget before touching the filesystem
    if jobs and budget_bytes is not None:
        _feasible_workers(max(task.peak_bytes(j) for j in jobs), 1, budget_bytes, [])
    store = KernelStore.create(path, header, overwrite=overwrite, durable=durable)
    try:
        report = run(plan, jobs, task, store, workers, budget_bytes, on_commit)
    except BaseException:
        store.close()
        raise
    return store, report


def task_for_store(store: KernelStore, spec: ModelSpec, params: ParamVector, x_rows, x_cols=None) -> KernelTask:
    """Rebuild the task recorded in a header and verify every fingerprint."""
    h = store.header
    x_rows = check_batch(spec, x_rows)
    if h.symmetric and x_cols is not None:
        raise DimensionError("symmetric kernel files take only one dataset")
    fp_cols = None if h.symmetric else data_fingerprint(x_cols if x_cols is not None else x_rows)
    store.check_fingerprints(model_fingerprint(spec, params), data_fingerprint(x_rows), fp_cols)
    task = KernelTask(spec, params, x_rows, None if h.symmetric else (x_cols if x_cols is not None else x_rows),
                      kind=h.kind, algorithm=h.algorithm, mode=h.pntk_mode, layer_mask=h.layer_mask)
    if task.extents != (h.rows, h.cols):
        raise IntegrityError(f"dataset implies a {task.extents} kernel but the file holds {h.rows}x{h.cols}")
    return task


def resume_file(path, spec, params, x_rows, x_cols=None, *, workers=1, budget_bytes=None, on_commit=None,
                durable=True):
    """Compute only the tiles whose bitmap bit is unset."""
    store = KernelStore.open(path, durable=durable)
    try:
        task = task_for_store(store, spec, params, x_rows, x_cols)
        missing = store.resume_plan()
        report = run(store.plan, task.jobs(store.plan, missing), task, store, workers, budget_bytes, on_commit)
    except BaseException:
        store.close()
        raise
    return store, report


def append_file(old_path, new_path, spec, params, x_rows, x_cols=None, *, workers=1, budget_bytes=None,
                overwrite=False, on_commit=None, durable=True):
    """Extend an existing kernel with new row samples (both sides when symmetric).

    ``x_rows`` is the full enlarged dataset; its leading samples must be the
    ones the old file was computed on.
    """
    x_rows = check_batch(spec, x_rows)
    with KernelStore.open(old_path, durable=durable) as old:
        h = old.header
        per = h.output_count if h.kind == "ntk" else 1
        old_b = h.rows // per
        if x_rows.shape[0] < old_b:
            raise DimensionError(f"append cannot shrink the kernel from {old_b} to {x_rows.shape[0]} samples")
        if data_fingerprint(x_rows[:old_b]) != h.data_fingerprint_rows:
            raise IntegrityError("row data fingerprint differs: the leading samples are not the original dataset")
        fp_cols = None
        if not h.symmetric:
            if x_cols is None:
                raise DimensionError("non-symmetric kernel append needs the column dataset")
            fp_cols = data_fingerprint(check_batch(spec, x_cols))
            old.check_fingerprints(data_fingerprint_cols=fp_cols)
        fp_rows = data_fingerprint(x_rows)
        store = old.append_rows(new_path, (x_rows.shape[0] - old_b) * per, model_fingerprint(spec, params),
                                fp_rows, fp_rows if h.symmetric else fp_cols, overwrite=overwrite)
    try:
        task = task_for_store(store, spec, params, x_rows, x_cols)
        report = run(store.plan, task.jobs(store.plan, store.missing()), task, store, workers, budget_bytes,
                     on_commit)
    except BaseException:
        store.close()
        raise
    return store, report
