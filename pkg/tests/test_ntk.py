import numpy as np
import pytest

from entk import accounting
from entk.autodiff import jacobian_naive, vjp
from entk.errors import BudgetError, DimensionError
from entk.model import Dense, ModelSpec, init_params, make_params, parse_spec
from entk.ntk import (
    ALGORITHMS,
    compute_kernel,
    estimate_peak_bytes,
    kernel_values,
    ntk_jacobian_contraction,
    ntk_layerwise,
    ntk_naive,
    ntk_vector_products,
    pntk,
    scalar_cotangent,
)
from entk.rng import SplitMix64
from entk.tensor_core import kron_identity, relative_frobenius
from entk.verify import kernel_well_formed, linear_model, reference_models
from oracles import ntk_by_double_loop, triple_loop_matmul

MODELS = reference_models()
IDS = [m.name for m in MODELS]


class TestAnalytic:
    @pytest.mark.parametrize("alg", ALGORITHMS)
    def test_linear_full_ntk(self, alg):
        m = linear_model()
        x2 = m.x[:3]
        gram = triple_loop_matmul(m.x, x2.T)
        for values in (kernel_values(m.spec, m.params, m.x, x2, algorithm=alg),):
            assert relative_frobenius(values, kron_identity(gram, 4)) <= 1e-12
        sym = kernel_values(m.spec, m.params, m.x, algorithm=alg)
        assert relative_frobenius(sym, kron_identity(triple_loop_matmul(m.x, m.x.T), 4)) <= 1e-12

    @pytest.mark.parametrize("alg", ALGORITHMS)
    @pytest.mark.parametrize("mode", ["sum", "first"])
    def test_linear_pntk(self, alg, mode):
        m = linear_model()
        values = kernel_values(m.spec, m.params, m.x, kind="pntk", mode=mode, algorithm=alg)
        assert relative_frobenius(values, triple_loop_matmul(m.x, m.x.T)) <= 1e-12

    def test_first_logit_block_relation_bit_exact(self):
        m = linear_model()
        theta = kernel_values(m.spec, m.params, m.x)
        np.testing.assert_array_equal(kron_identity(kernel_values(m.spec, m.params, m.x, kind="pntk", mode="first"), 4),
                                      theta)

    def test_scalar_model(self):
        spec = ModelSpec((1,), (Dense(1, 1),))
        p = make_params(spec, [2.0])
        k = ntk_jacobian_contraction(spec, p, [[3.0]], [[5.0]])
        np.testing.assert_array_equal(k.values, [[15.0]])

    def test_cotangents(self):
        np.testing.assert_allclose(scalar_cotangent(4, "sum"), [0.5] * 4)
        np.testing.assert_array_equal(scalar_cotangent(3, "first"), [1.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            scalar_cotangent(3, "mean")


class TestAgreement:
    def test_tanh_mlp_against_double_loop(self):
        spec = parse_spec("input 3\ndense 3 6 bias\ntanh\ndense 6 3\n")
        p = init_params(spec, 1)
        x = SplitMix64(2).normal(12).reshape(4, 3)
        rows = [vjp(spec, p, x[i], np.eye(3)[o]) for i in range(4) for o in range(3)]
        ref = ntk_by_double_loop(rows, rows)
        np.testing.assert_allclose(ntk_jacobian_contraction(spec, p, x).values, ref, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("m", MODELS, ids=IDS)
    @pytest.mark.parametrize("kind", ["ntk", "pntk"])
    def test_three_algorithms_agree(self, m, kind):
        for x2 in (None, m.x[:4]):
            ref = kernel_values(m.spec, m.params, m.x, x2, kind=kind, algorithm="contraction")
            naive = kernel_values(m.spec, m.params, m.x, x2, kind=kind, algorithm="naive")
            nvp = kernel_values(m.spec, m.params, m.x, x2, kind=kind, algorithm="nvp")
            np.testing.assert_array_equal(naive, ref)
            assert relative_frobenius(nvp, ref) <= 1e-9

    @pytest.mark.parametrize("m", MODELS, ids=IDS)
    def test_pntk_matches_gradient_gram(self, m):
        u = scalar_cotangent(m.spec.output_count, "sum")
        grads = [vjp(m.spec, m.params, xi, u) for xi in m.x]
        ref = ntk_by_double_loop(grads, grads)
        assert relative_frobenius(pntk(m.spec, m.params, m.x).values, ref) <= 1e-12

    def test_wrappers(self):
        m = MODELS[1]
        assert ntk_naive(m.spec, m.params, m.x).algorithm == "naive"
        assert ntk_vector_products(m.spec, m.params, m.x).algorithm == "nvp"
        k = pntk(m.spec, m.params, m.x, m.x[:2], mode="first")
        assert k.kind == "pntk" and k.pntk_mode == "first" and k.shape == (6, 2) and not k.symmetric


class TestLayerwise:
    def test_single_layer_equals_full(self):
        m = linear_model()
        parts = ntk_layerwise(m.spec, m.params, m.x)
        assert len(parts) == 1
        np.testing.assert_array_equal(parts[0][1].values, compute_kernel(m.spec, m.params, m.x).values)

    @pytest.mark.parametrize("m", [m for m in MODELS if m.multi_layer], ids=lambda m: m.name)
    @pytest.mark.parametrize("kind", ["ntk", "pntk"])
    def test_additivity(self, m, kind):
        for alg in ALGORITHMS:
            full = compute_kernel(m.spec, m.params, m.x, kind=kind, algorithm=alg).values
            parts = ntk_layerwise(m.spec, m.params, m.x, kind=kind, algorithm=alg)
            assert [k for k, _ in parts] == list(range(m.spec.n_param_layers))
            assert relative_frobenius(sum(p.values for _, p in parts), full) <= 1e-10

    def test_empty_selection(self):
        m = MODELS[1]
        with pytest.raises(DimensionError):
            ntk_layerwise(m.spec, m.params, m.x, layers=[])


class TestWellFormed:
    @pytest.mark.parametrize("m", MODELS, ids=IDS)
    def test_symmetric_kernels(self, m):
        for kind in ("ntk", "pntk"):
            for alg in ALGORITHMS:
                k = compute_kernel(m.spec, m.params, m.x, kind=kind, algorithm=alg)
                assert k.symmetric and k.well_formed()
                assert kernel_well_formed(k.values)[0]
                np.testing.assert_array_equal(k.values, k.values.T)

    def test_metadata(self):
        m = MODELS[2]
        k = compute_kernel(m.spec, m.params, m.x, layer_mask=[1])
        assert k.layer_mask == (1,)
        assert k.data_fingerprints[0] == k.data_fingerprints[1]
        assert len(k.model_fingerprint) == 32


class TestMemory:
    def test_budget_fails_fast(self):
        m = MODELS[1]
        with pytest.raises(BudgetError, match="chunked"):
            compute_kernel(m.spec, m.params, m.x, budget_bytes=64)

    def test_vector_products_peak_below_contraction(self):
        spec = parse_spec("input 20\ndense 20 200\ntanh\ndense 200 1\n")
        p = init_params(spec, 0)
        x = SplitMix64(0).normal(8 * 20).reshape(8, 20)
        peaks = {}
        for alg in ("contraction", "nvp"):
            with accounting.track() as meter:
                kernel_values(spec, p, x, algorithm=alg)
            peaks[alg] = meter.peak
            assert meter.peak == estimate_peak_bytes(spec, p, 8, 8, "ntk", alg, None, True)
        assert peaks["nvp"] < peaks["contraction"]
        assert peaks["nvp"] <= 8 * (max(8 * 1, p.size) + p.size)
        assert peaks["contraction"] >= 8 * 8 * 1 * p.size

    def test_naive_peak_counts_jacobian(self):
        m = MODELS[1]
        with accounting.track() as meter:
            jacobian_naive(m.spec, m.params, m.x)
        assert meter.peak >= m.x.shape[0] * 4 * m.params.size * 8
