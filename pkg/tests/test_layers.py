import numpy as np
import pytest

from fhe_nonlinear.fixed_point import LAYERNORM_FORMAT, SOFTMAX_FORMAT, Arith, ContractError, MirrorEngine, mirror_value
from fhe_nonlinear.layers import LAYERNORM_EPS, LayerNormParams, layernorm, softmax
from fhe_nonlinear.mirror import mirror_eval, reference, sample_inputs
from fhe_nonlinear.nonlinear import FunctionEvaluator

SOFTMAX_TOL = 2.0 ** -12
LAYERNORM_TOL = 2.0 ** -10


def _softmax(xs, luts):
    return mirror_eval("softmax", np.asarray(xs, dtype=np.float64), luts).outputs


def _layernorm(xs, luts, params=None):
    return mirror_eval("layernorm", np.asarray(xs, dtype=np.float64), luts, params).outputs


class TestSoftmax:
    def test_single_element_is_one(self, luts):
        assert abs(_softmax([[3.25]], luts)[0, 0] - 1.0) <= SOFTMAX_FORMAT.ulp

    def test_uniform_input(self, luts):
        out = _softmax([[1.5] * 4], luts)
        assert np.abs(out - 0.25).max() <= SOFTMAX_TOL

    @pytest.mark.parametrize("n", [1, 4, 8, 16])
    def test_matches_reference_and_sums_to_one(self, luts, rng, n):
        x = sample_inputs("softmax", rng, 50, n)
        out = _softmax(x, luts)
        assert np.abs(out - reference("softmax", x)).max() <= SOFTMAX_TOL
        assert (out >= 0).all()
        assert np.abs(out.sum(axis=1) - 1).max() <= n * SOFTMAX_TOL

    def test_shift_invariance(self, luts, rng):
        x = np.round(sample_inputs("softmax", rng, 20, 6) * 2**20) / 2**20
        assert np.array_equal(_softmax(x, luts), _softmax(x + 2.75, luts))

    def test_rejects_wrong_format(self, luts):
        fe = FunctionEvaluator(Arith(MirrorEngine()), luts=luts)
        with pytest.raises(ContractError):
            softmax(fe, [mirror_value([1.0], LAYERNORM_FORMAT)])


class TestLayerNorm:
    def test_constant_input_returns_beta_exactly(self, luts):
        params = LayerNormParams((1.5, -2.0, 0.5), (0.25, -1.0, 3.0))
        out = _layernorm([[2.5, 2.5, 2.5], [-7.0, -7.0, -7.0]], luts, params)
        assert np.array_equal(out, np.tile(params.beta, (2, 1)))

    def test_two_element_closed_form(self, luts):
        out = _layernorm([[-1.0, 1.0]], luts)
        want = np.array([-1.0, 1.0]) / np.sqrt(1 + LAYERNORM_EPS)
        assert np.abs(out[0] - want).max() <= LAYERNORM_TOL

    @pytest.mark.parametrize("n", [2, 16])
    def test_random_params_match_reference(self, luts, rng, n):
        x = sample_inputs("layernorm", rng, 20, n)
        params = LayerNormParams(rng.uniform(-2, 2, n), rng.uniform(-1, 1, n))
        assert np.abs(_layernorm(x, luts, params) - reference("layernorm", x, params)).max() <= LAYERNORM_TOL

    def test_identity_params_centred(self, luts, rng):
        out = _layernorm(sample_inputs("layernorm", rng, 20, 8), luts)
        assert np.abs(out.mean(axis=1)).max() <= LAYERNORM_TOL

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            LayerNormParams((1.0,), (0.0, 0.0))
        with pytest.raises(ValueError):
            LayerNormParams((float("nan"),), (0.0,))
        with pytest.raises(ValueError):
            LayerNormParams((1.0,), (0.0,), eps=1e-5)

    def test_length_checks(self, luts):
        fe = FunctionEvaluator(Arith(MirrorEngine()), luts=luts)
        one = [mirror_value([1.0], LAYERNORM_FORMAT)]
        with pytest.raises(ValueError):
            layernorm(fe, one, LayerNormParams.identity(1))
        with pytest.raises(ValueError):
            layernorm(fe, one * 3, LayerNormParams.identity(2))
