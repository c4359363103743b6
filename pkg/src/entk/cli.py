"""``entk`` command line.

Exit codes: 0 success, 1 usage, 2 refusal to overwrite, 3 integrity,
4 memory budget, 5 numerical-check failure. Errors go to stderr as one line.
"""
from __future__ import annotations

import argparse
import os
import signal
import sys

import numpy as np

from . import bench as bench_mod
from . import verify as verify_mod
from .data import load_labels, load_source, source_input_dim
from .errors import EntkError, NumericalCheckError, RefusalError
from .model import ModelSpec, init_params, make_params, parse_spec
from .ntk import ALGORITHMS, KINDS, PNTK_MODES, compute_kernel
from .regression import accuracy, krr_fit, krr_predict
from .scheduler import (
    KernelTask,
    append_file,
    compute_to_file,
    default_chunk,
    resolve_workers,
    resume_file,
)
from .store import KernelStore, load_kernel
from .tensor_core import asymmetry, is_psd, sym_eig_topk

FAULT_ENV = "ENTK_FAULT_AFTER_TILES"
DEFAULT_HIDDEN = 32
DEFAULT_CLASSES = 2
DEFAULT_LAMBDA = 1e-3
USAGE_EXIT = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def default_model(input_dim: int) -> ModelSpec:
    return parse_spec(f"input {input_dim}\ndense {input_dim} {DEFAULT_HIDDEN} bias\ntanh\n"
                      f"dense {DEFAULT_HIDDEN} {DEFAULT_CLASSES}\n")


def _add_model_args(p, data_required=True):
    p.add_argument("--model", help="model spec text file (default: d->32 tanh->2 MLP)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--params", help="parameter file: raw little-endian float64 or .npy")
    group.add_argument("--seed", type=int, help="initialize parameters from this seed (default 0)")
    p.add_argument("--data", required=data_required, help="blobs:B,d,sep[,seed] or csv:PATH")


def _add_kernel_args(p):
    p.add_argument("--kind", choices=KINDS, default="ntk")
    p.add_argument("--pntk-mode", choices=PNTK_MODES, default="sum")
    p.add_argument("--algorithm", choices=ALGORITHMS, default="contraction")
    p.add_argument("--layers", default="all", help="comma list of parameterized-layer indices, or 'all'")


def _add_run_args(p):
    p.add_argument("--batch-size", type=int, help="samples per tile edge")
    p.add_argument("--chunk", type=int, help="kernel rows per tile edge (overrides --batch-size)")
    p.add_argument("--workers", type=int, help="worker threads (default: $ENTK_WORKERS or 1)")
    p.add_argument("--budget-bytes", type=int, help="cap on estimated intermediate bytes")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--overwrite", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="entk", description="Empirical NTK / pNTK computation and tooling")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("compute", help="compute a kernel into an ENTK file")
    _add_model_args(p)
    p.add_argument("--cross-data", help="column-side dataset for a non-symmetric cross kernel")
    _add_kernel_args(p)
    _add_run_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("resume", help="finish the missing tiles of an ENTK file")
    _add_model_args(p)
    p.add_argument("--cross-data")
    _add_run_args(p)
    p.add_argument("--out", required=True, help="the ENTK file to resume")

    p = sub.add_parser("append", help="extend an ENTK file with new samples into a new file")
    _add_model_args(p)
    p.add_argument("--cross-data")
    _add_run_args(p)
    p.add_argument("--from", dest="source", required=True, help="existing ENTK file")
    p.add_argument("--out", required=True, help="new ENTK file")

    p = sub.add_parser("layerwise", help="one kernel file per parameterized layer")
    _add_model_args(p)
    _add_kernel_args(p)
    _add_run_args(p)
    p.add_argument("--out", required=True, help="output stem; writes STEM.layerK.entk")

    p = sub.add_parser("eigencheck", help="top eigenvalues, symmetry and PSD of a kernel file")
    p.add_argument("path")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-10)

    p = sub.add_parser("regress", help="kernel ridge regression")
    _add_model_args(p, data_required=False)
    _add_kernel_args(p)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--train", help="training kernel ENTK file (symmetric)")
    p.add_argument("--cross", help="test x train cross kernel ENTK file")
    p.add_argument("--labels", help="training labels CSV")
    p.add_argument("--test-labels", help="test labels CSV, for accuracy")
    p.add_argument("--train-size", type=int, help="with --data: first N samples train, the rest test")

    p = sub.add_parser("bench", help="algorithm timing sweep")
    p.add_argument("--archs", default="mlp:16,64")
    p.add_argument("--batch-sizes", default="8")
    p.add_argument("--outputs", default="1,10,100")
    p.add_argument("--algorithms", default=",".join(ALGORITHMS))
    p.add_argument("--kind", choices=KINDS, default="ntk")
    p.add_argument("--repeats", type=int, default=bench_mod.DEFAULT_REPEATS)
    p.add_argument("--workers", type=int)
    p.add_argument("--chunk", type=int)
    p.add_argument("--budget-bytes", type=int)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("inspect", help="print an ENTK header")
    p.add_argument("path")

    p = sub.add_parser("verify", help="run the invariant checks")
    p.add_argument("--corrupt-tile", action="store_true", help="test hook: perturb one stored tile entry")
    p.add_argument("--no-sweep", action="store_true", help="skip the width sweep")
    p.add_argument("--sweep-csv", help="write the width-sweep CSV here")
    return parser


# -- helpers ---------------------------------------------------------------------


def _print_config(args):
    for key, value in sorted(vars(args).items()):
        if key == "func":
            continue
        if key == "workers" and args.command not in ("inspect", "eigencheck", "verify", "regress"):
            value = resolve_workers(value)
        print(f"{key}: {'' if value is None else value}")


def _parse_layers(text):
    if text is None or text.strip() == "all":
        return None
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"--layers must be 'all' or a comma list of integers, got {text!r}") from None


def _load_model(args):
    if args.model:
        with open(args.model) as fh:
            spec = parse_spec(fh.read())
    else:
        dim = source_input_dim(args.data) if args.data else None
        if dim is None:
            if not args.data:
                raise UsageError("--model or --data is required")
            # without --model every CSV column is a feature, except regress's trailing label column
            dim = load_source(args.data).x.shape[1] - (1 if args.command == "regress" else 0)
        spec = default_model(dim)
    if args.params:
        raw = np.load(args.params) if args.params.endswith(".npy") else np.fromfile(args.params, dtype="<f8")
        params = make_params(spec, raw)
    else:
        params = init_params(spec, 0 if args.seed is None else args.seed)
    return spec, params


def _load_data(text, spec):
    return load_source(text, spec.input_shape)


def _on_commit():
    limit = os.environ.get(FAULT_ENV, "").strip()
    if not limit:
        return None
    limit = int(limit)

    def hook(done, _job):
        if done >= limit:
            os.kill(os.getpid(), signal.SIGTERM)

    return hook


def _print_report(report):
    print(f"{report.tiles_computed} tiles computed")
    print(f"tiles_computed: {report.tiles_computed}")
    print(f"wall_seconds: {report.wall_seconds:.6f}")
    print(f"workers_used: {report.workers}")
    print(f"per_worker: {','.join(map(str, report.per_worker))}")
    print(f"peak_estimated_bytes: {report.peak_estimated_bytes}")
    print(f"peak_measured_bytes: {report.peak_measured_bytes}")
    for note in report.notes:
        print(f"note: {note}")


def _chunk(args, kind, spec):
    rows_per = spec.output_count if kind == "ntk" else 1
    return default_chunk(rows_per, args.batch_size, args.chunk)


def _header_matches(path, task) -> bool:
    with KernelStore.open(path) as store:
        want = task.header(store.header.chunk, store.header.dtype)
        return store.header == want


# -- subcommands -------------------------------------------------------------------


def cmd_compute(args):
    spec, params = _load_model(args)
    x = _load_data(args.data, spec).x
    x2 = _load_data(args.cross_data, spec).x if args.cross_data else None
    task = KernelTask(spec, params, x, x2, kind=args.kind, algorithm=args.algorithm, mode=args.pntk_mode,
                      layer_mask=_parse_layers(args.layers))
    store, report = compute_to_file(args.out, task, chunk=_chunk(args, args.kind, spec), dtype=args.dtype,
                                    workers=args.workers, budget_bytes=args.budget_bytes,
                                    overwrite=args.overwrite, on_commit=_on_commit())
    print(f"rows: {store.plan.rows}")
    print(f"cols: {store.plan.cols}")
    store.close()
    _print_report(report)
    return 0


def cmd_resume(args):
    spec, params = _load_model(args)
    x = _load_data(args.data, spec).x
    x2 = _load_data(args.cross_data, spec).x if args.cross_data else None
    store, report = resume_file(args.out, spec, params, x, x2, workers=args.workers,
                                budget_bytes=args.budget_bytes, on_commit=_on_commit())
    store.close()
    _print_report(report)
    return 0


def cmd_append(args):
    spec, params = _load_model(args)
    x = _load_data(args.data, spec).x
    x2 = _load_data(args.cross_data, spec).x if args.cross_data else None
    if os.path.exists(args.out) and not args.overwrite:
        # re-running on our own output just finishes it
        store, report = resume_file(args.out, spec, params, x, x2, workers=args.workers,
                                    budget_bytes=args.budget_bytes, on_commit=_on_commit())
    else:
        store, report = append_file(args.source, args.out, spec, params, x, x2, workers=args.workers,
                                    budget_bytes=args.budget_bytes, overwrite=args.overwrite,
                                    on_commit=_on_commit())
    print(f"rows: {store.plan.rows}")
    print(f"cols: {store.plan.cols}")
    store.close()
    _print_report(report)
    return 0


def cmd_layerwise(args):
    spec, params = _load_model(args)
    x = _load_data(args.data, spec).x
    layers = _parse_layers(args.layers)
    selected = range(spec.n_param_layers) if layers is None else layers
    chunk = _chunk(args, args.kind, spec)
    stem = args.out[:-5] if args.out.endswith(".entk") else args.out
    norms = []
    for k in selected:
        path = f"{stem}.layer{k}.entk"
        task = KernelTask(spec, params, x, kind=args.kind, algorithm=args.algorithm, mode=args.pntk_mode,
                          layer_mask=(k,))
        if os.path.exists(path) and not args.overwrite and _header_matches(path, task):
            store, report = resume_file(path, spec, params, x, workers=args.workers, budget_bytes=args.budget_bytes)
        else:
            store, report = compute_to_file(path, task, chunk=chunk, dtype=args.dtype, workers=args.workers,
                                            budget_bytes=args.budget_bytes, overwrite=args.overwrite)
        values = store.assemble()
        store.close()
        norms.append((k, path, float(np.linalg.norm(values)), float(np.trace(values)), report.tiles_computed))
    total_trace = sum(n[3] for n in norms) or 1.0
    for k, path, fro, tr, tiles in norms:
        print(f"layer {k}: file={path} frobenius={fro:.6e} trace={tr:.6e} "
              f"trace_share={tr / total_trace:.4f} tiles_computed={tiles}")
    return 0


def cmd_eigencheck(args):
    km = load_kernel(args.path)
    k = min(args.k, km.values.shape[0])
    values = sym_eig_topk(km.values, k, tol=args.tol)
    asym = asymmetry(km.values)
    psd = is_psd(km.values, verify_mod.PSD_RTOL)
    print("eigenvalues: " + " ".join(f"{v:.12e}" for v in values))
    print(f"asymmetry: {asym:.3e}")
    print(f"psd: {str(psd).lower()}")
    if km.symmetric and not (asym <= verify_mod.SYMMETRY_RTOL and psd):
        raise NumericalCheckError(f"{args.path}: kernel fails the symmetry/PSD check "
                                  f"(asymmetry {asym:.3e}, psd {str(psd).lower()})")
    return 0


def cmd_regress(args):
    if args.train:
        if not (args.cross and args.labels):
            raise UsageError("--train needs --cross and --labels")
        k_train = load_kernel(args.train)
        k_cross = load_kernel(args.cross)
        y = load_labels(args.labels)
        classes = max(int(y.max()) + 1, k_train.output_count if k_train.kind == "ntk" else 0)
        test_labels = load_labels(args.test_labels) if args.test_labels else None
    else:
        if not (args.data and args.train_size):
            raise UsageError("regress needs either --train/--cross/--labels or --data with --train-size")
        spec, params = _load_model(args)
        data = _load_data(args.data, spec)
        if data.labels is None:
            raise UsageError("--data has no labels")
        n = args.train_size
        if not 0 < n < data.size:
            raise UsageError(f"--train-size must be in (0, {data.size})")
        common = dict(kind=args.kind, algorithm=args.algorithm, mode=args.pntk_mode,
                      layer_mask=_parse_layers(args.layers))
        k_train = compute_kernel(spec, params, data.x[:n], **common)
        k_cross = compute_kernel(spec, params, data.x[n:], data.x[:n], **common)
        y, test_labels = data.labels[:n], data.labels[n:]
        classes = spec.output_count if args.kind == "ntk" else int(y.max()) + 1
    model = krr_fit(k_train, y, args.lam, classes=classes)
    _, labels = krr_predict(model, k_cross)
    train_pred = krr_predict(model, k_train)[1]
    print(f"train_accuracy: {accuracy(train_pred, y):.6f}")
    if test_labels is not None:
        if test_labels.shape[0] != labels.shape[0]:
            raise UsageError(f"{test_labels.shape[0]} test labels for {labels.shape[0]} predictions")
        print(f"test_accuracy: {accuracy(labels, test_labels):.6f}")
    print("predictions: " + ",".join(str(int(v)) for v in labels))
    return 0


def cmd_bench(args):
    def ints(text):
        return [int(v) for v in text.split(",") if v.strip()]

    archs = [a for a in args.archs.split(";") if a.strip()]
    records = bench_mod.sweep(archs, ints(args.batch_sizes), ints(args.outputs),
                              algorithms=tuple(a.strip() for a in args.algorithms.split(",")),
                              repeats=args.repeats, workers=resolve_workers(args.workers), chunk=args.chunk,
                              kind=args.kind, budget_bytes=args.budget_bytes)
    text = bench_mod.emit_csv(records)
    if args.out:
        if os.path.exists(args.out) and not args.overwrite:
            raise RefusalError(f"{args.out} already exists; pass --overwrite to replace it")
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(bench_mod.recommend(records).table())
    return 0


def cmd_inspect(args):
    with KernelStore.open(args.path) as store:
        for key, value in store.describe().items():
            print(f"{key}: {value}")
    return 0


def cmd_verify(args):
    report = None
    if not args.no_sweep:
        report = verify_mod.width_sweep()
    results = verify_mod.run_suite(corrupt_tile=args.corrupt_tile, sweep=not args.no_sweep, sweep_report=report)
    for r in results:
        print(r.line())
    if report is not None:
        print(report.table())
        if args.sweep_csv:
            with open(args.sweep_csv, "w") as fh:
                fh.write(report.to_csv())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalCheckError("failing checks: " + ",".join(failed))
    return 0


COMMANDS = {
    "compute": cmd_compute, "resume": cmd_resume, "append": cmd_append, "layerwise": cmd_layerwise,
    "eigencheck": cmd_eigencheck, "regress": cmd_regress, "bench": cmd_bench, "inspect": cmd_inspect,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _print_config(args)
        sys.stdout.flush()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except EntkError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
