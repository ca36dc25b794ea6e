import numpy as np
import pytest

from fhe_nonlinear.mirror import INPUT_FORMATS, mirror_eval, reference
from fhe_nonlinear.nonlinear import (
    FunctionEvalConfig,
    GeneratedLut,
    InvSqrtRegion,
    build_luts,
    invsqrt_slope_scale,
)
from fhe_nonlinear.torus import ConfigurationError

EXP_TARGET = 2.0 ** -18
GELU_TARGET = 2.0 ** -16
INVSQRT_TARGET = 2.0 ** -14


def _m(op, xs, luts):
    return mirror_eval(op, np.asarray(xs, dtype=np.float64), luts).outputs


class TestTables:
    def test_exp_entry_zero_is_one(self, luts):
        frac = FunctionEvalConfig().exp_out_frac
        assert int(luts.exp.table.values[0, 0]) == 1 << frac

    def test_gelu_entry_zero(self, luts):
        cfg = FunctionEvalConfig()
        value, slope = luts.gelu.table.lookup(0)
        assert int(value) == 0
        assert int(slope) == round(0.5 * 2 ** cfg.gelu_slope_bits[1])

    def test_invsqrt_region_entry_at_one(self, luts):
        cfg = FunctionEvalConfig()
        region = 2
        r = cfg.invsqrt_regions[region]
        assert (r.lo_exp, r.hi_exp) == (-6, 2)
        s = cfg.invsqrt_window_start(r)
        t_index = 1 << (40 - 2 * s)  # t = index * 2^(2s - 40) = 1
        f, g = luts.invsqrt.table.lookup((region << cfg.invsqrt_t_bits) + t_index)
        assert int(f) == 1 << cfg.invsqrt_out[1]
        assert int(g) == round(0.5 * 2 ** invsqrt_slope_scale(cfg, r))

    def test_tables_are_deterministic(self, luts):
        again = build_luts()
        for name in ("exp", "gelu", "invsqrt"):
            assert np.array_equal(getattr(again, name).table.values, getattr(luts, name).table.values)

    def test_save_load_with_metadata(self, luts, tmp_path):
        luts.gelu.save(tmp_path / "gelu.tgr")
        back = GeneratedLut.load(tmp_path / "gelu.tgr")
        assert back.metadata() == luts.gelu.metadata()
        assert back.metadata()["rounding"] == "half-even"
        assert np.array_equal(back.table.values, luts.gelu.table.values)


class TestConfig:
    def test_digest_stable_and_sensitive(self):
        a, b = FunctionEvalConfig(), FunctionEvalConfig()
        assert a.digest() == b.digest()
        assert FunctionEvalConfig(exp_out_frac=21).digest() != a.digest()

    def test_dict_roundtrip(self):
        cfg = FunctionEvalConfig()
        assert FunctionEvalConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kwargs", [
        {"exp_split": (6, 18, 6)},
        {"exp_split": (5, 21, 6)},
        {"gelu_t_bits": 18},
        {"gelu_threshold": 8.0},
        {"invsqrt_regions": (InvSqrtRegion(-16, -6, 0), InvSqrtRegion(-4, 12, 0))},
        {"invsqrt_regions": (InvSqrtRegion(-15, 12, 0),)},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            FunctionEvalConfig(**kwargs)


class TestExp:
    def test_zero_is_exactly_one(self, luts):
        assert _m("exp", [0.0], luts)[0] == 1.0

    @pytest.mark.parametrize("x", [64.0, 100.5, 4095.0])
    def test_flushes_large_inputs(self, luts, x):
        assert _m("exp", [x], luts)[0] == 0.0

    def test_non_increasing(self, luts):
        xs = np.sort(np.random.default_rng(3).uniform(0, 64, 20_000))
        assert (np.diff(_m("exp", xs, luts)) <= 0).all()

    def test_taylor_remainder_bound(self):
        # the low split is 6 bits below the 2^-20 ULP: x2 < 2^-14
        x2 = np.arange(64) * 2.0 ** -20
        assert np.abs(np.exp(-x2) - (1 - x2)).max() <= (x2.max() ** 2) / 2 <= 2.0 ** -29

    def test_random_inputs_within_target(self, luts, rng):
        xs = rng.uniform(0, 64, 5000)
        assert np.abs(_m("exp", xs, luts) - reference("exp", xs)).max() <= EXP_TARGET


class TestGelu:
    @pytest.mark.parametrize("x,want", [(0.0, 0.0), (32.0, 32.0), (16.0, 16.0), (-32.0, 0.0)])
    def test_fixed_points(self, luts, x, want):
        assert _m("gelu", [x], luts)[0] == want

    def test_threshold_seam_continuity(self, luts):
        ulp = INPUT_FORMATS["gelu"].ulp
        for seam in (16.0, -16.0):
            xs = np.array([seam - ulp, seam, seam + ulp])
            got, ref = _m("gelu", xs, luts), reference("gelu", xs)
            assert np.abs(np.diff(got) - np.diff(ref)).max() <= 2 * GELU_TARGET

    def test_random_inputs_within_target(self, luts, rng):
        xs = rng.uniform(-16, 16, 5000)
        assert np.abs(_m("gelu", xs, luts) - reference("gelu", xs)).max() <= GELU_TARGET


class TestInvSqrt:
    @pytest.mark.parametrize("x,want", [(1.0, 1.0), (4.0, 0.5)])
    def test_exact_points_within_ulp(self, luts, x, want):
        assert abs(_m("invsqrt", [x], luts)[0] - want) <= 2.0 ** -24

    def test_non_increasing(self, luts):
        rng = np.random.default_rng(5)
        xs = np.sort(2.0 ** rng.uniform(-16, 12, 20_000))
        assert (np.diff(_m("invsqrt", xs, luts)) <= 0).all()

    def test_region_seams_continuity(self, luts):
        ulp = INPUT_FORMATS["invsqrt"].ulp
        for r in FunctionEvalConfig().invsqrt_regions[1:]:
            edge = 2.0 ** r.lo_exp
            xs = np.array([edge - ulp, edge])
            got, ref = _m("invsqrt", xs, luts), reference("invsqrt", xs)
            jump = abs((got[1] - got[0]) - (ref[1] - ref[0])) / ref[1]
            assert jump <= 2 * INVSQRT_TARGET

    def test_random_inputs_within_target(self, luts, rng):
        xs = 2.0 ** rng.uniform(-16, 12, 5000)
        ref = reference("invsqrt", xs)
        assert (np.abs(_m("invsqrt", xs, luts) - ref) / ref).max() <= INVSQRT_TARGET
