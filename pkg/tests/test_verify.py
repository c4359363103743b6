import csv
import io

import numpy as np
import pytest

from entk.model import Dense, ModelSpec
from entk.ntk import kernel_values
from entk.verify import (ConvergenceReport, check_additivity, check_cross_algorithm, check_fd_oracle,
                         check_naive_batched, check_pntk_block, check_symmetry_psd, kink_free_inputs,
                         kron_relative_error, linear_model, reference_models, run_suite, width_sweep, _pre_activation)


@pytest.fixture(scope="module")
def models():
    return reference_models()


def test_reference_architectures(models):
    assert [m.name for m in models] == ["linear", "tanh_mlp", "relu_mlp", "conv", "scalar"]
    assert [m.spec.n_param_layers for m in models] == [1, 2, 3, 2, 1]


def test_kink_free_inputs_keep_margin(models):
    m = models[2]
    relu_at = [i for i, layer in enumerate(m.spec.layers) if getattr(layer, "fn", None) == "relu"]
    for i in relu_at:
        assert np.min(np.abs(_pre_activation(m.spec, m.params, m.x, i))) >= 1e-2
    with pytest.raises(RuntimeError):
        kink_free_inputs(m.spec, m.params, 3, margin=1e6, max_draws=20)


def test_default_checks_pass(models):
    for check in (check_fd_oracle, check_naive_batched, check_cross_algorithm, check_additivity):
        result = check(models)
        assert result.passed, result.line()
    assert check_pntk_block().passed
    assert check_symmetry_psd(models).passed


def test_line_format(models):
    line = check_naive_batched(models).line()
    assert line.startswith("CHECK naive_batched_bitexact PASS")


def test_corrupt_tile_fails_symmetry(models):
    result = check_symmetry_psd(models[:2], corrupt_tile=True)
    assert not result.passed and result.line().startswith("CHECK symmetry_psd FAIL")


def test_linear_model_zero_kron_error_every_width():
    def linear_for(width):
        return ModelSpec((8,), (Dense(8, 10),))

    report = width_sweep(widths=(16, 64, 256), seeds=2, mode="first", model_for_width=linear_for)
    assert all(v == 0.0 for row in report.rel_frobenius for v in row)
    assert all(v <= 1e-10 for row in report.rel_lambda_max for v in row)


def test_kron_ordering_guard():
    m = linear_model()
    theta = kernel_values(m.spec, m.params, m.x, kind="ntk")
    p = kernel_values(m.spec, m.params, m.x, kind="pntk", mode="first")
    assert kron_relative_error(theta, p, 4) == 0.0
    assert kron_relative_error(theta, p, 4, ordering="logit-major") > 0.1
    with pytest.raises(ValueError):
        kron_relative_error(theta, p, 4, ordering="other")


def test_single_width_warns():
    with pytest.warns(UserWarning, match="single-width"):
        report = width_sweep(widths=(16,), seeds=1)
    assert report.passed and report.warnings


def test_widths_must_ascend():
    with pytest.raises(ValueError):
        width_sweep(widths=(64, 16), seeds=1)


def test_report_table_and_csv():
    r = ConvergenceReport([16, 64], [0, 1], [[0.4, 0.2], [0.1, 0.05]], [[0.5, 0.3], [0.2, 0.1]])
    assert r.median_frobenius == [pytest.approx(0.3), pytest.approx(0.075)]
    assert r.passed
    rows = list(csv.reader(io.StringIO(r.to_csv())))
    assert rows[0] == ["width", "seed", "rel_frobenius", "rel_lambda_max"]
    assert rows[1] == ["16", "0", "0.4", "0.5"] and len(rows) == 5
    assert len(r.table().splitlines()) == 3
    flat = ConvergenceReport([16, 64], [0], [[0.2], [0.2]], [[0.5], [0.1]])
    assert not flat.passed


def test_suite_without_sweep(models):
    results = run_suite(models, sweep=False)
    assert [r.name for r in results] == ["fd_oracle", "naive_batched_bitexact", "cross_algorithm", "layer_additivity",
                                         "pntk_block_relation", "symmetry_psd"]
    assert all(r.passed for r in results)
