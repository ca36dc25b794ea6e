import json

import numpy as np
import pytest

from fhe_nonlinear.mirror import (
    FAILURE_THRESHOLD,
    OPS,
    NoiseEstimate,
    NoiseModel,
    error_sweep,
    measure_noise_points,
    mirror_eval,
    noise_track,
    phase_error,
    sample_inputs,
    split_columns,
)
from fhe_nonlinear.torus import paper_params


class TestNoiseModel:
    @pytest.mark.parametrize("level", [0, 1, 2])
    def test_fresh_is_key_sigma_squared(self, level):
        p = paper_params()
        assert NoiseModel(p).fresh(level).variance == p.sigma(level) ** 2

    @pytest.mark.parametrize("k", [1, 2, 7])
    def test_sum_of_fresh(self, k):
        m = NoiseModel(paper_params())
        f = m.fresh(1)
        assert m.linear([(f, 1)] * k).variance == pytest.approx(k * f.variance)

    def test_scaling_is_quadratic(self):
        m = NoiseModel(paper_params())
        assert m.linear([(m.fresh(1), 3)]).variance == pytest.approx(9 * m.fresh(1).variance)

    def test_failure_probability(self):
        fp = NoiseModel.failure_probability
        assert fp(0.0, 0.1) == 0.0
        assert fp(1e-6, 0.01) < fp(4e-6, 0.01)
        assert fp(1.0, 1.0) == pytest.approx(0.3173, abs=1e-4)

    def test_provenance_accumulates(self):
        e = NoiseEstimate(1.0, ("a",)).then(2.0, "b")
        assert e.provenance == ("a", "b") and e.std == pytest.approx(2 ** 0.5)


class TestNoiseTrack:
    def test_pbs_pipeline_not_flagged(self):
        pts = noise_track("pbs", paper_params())
        assert pts[0].estimate.variance == paper_params().sigma_l1 ** 2
        assert not any(p.flagged for p in pts)

    def test_twenty_bit_lookup_below_threshold(self):
        assert not any(p.flagged for p in noise_track("wop:20", paper_params()))

    def test_twenty_five_bit_lookup_flagged(self):
        pts = noise_track("wop:25", paper_params())
        assert any(p.flagged for p in pts)
        assert max(p.failure_probability or 0 for p in pts) > FAILURE_THRESHOLD

    def test_failure_grows_with_width(self):
        probs = [max(p.failure_probability or 0 for p in noise_track(f"wop:{b}", paper_params()))
                 for b in (16, 20, 23, 25)]
        assert probs == sorted(probs)

    def test_block_lookups_not_flagged(self):
        assert not any(p.flagged for p in noise_track("wop_blocks:25", paper_params()))

    def test_fft_factor_raises_noise(self):
        lo = noise_track("wop:20", paper_params())[-1].estimate.variance
        hi = noise_track("wop:20", paper_params(), fft_factor=4.0)[-1].estimate.variance
        assert hi > lo

    @pytest.mark.parametrize("name", ["bogus", "wop:", "wop:x"])
    def test_unknown_pipeline(self, name):
        with pytest.raises(ValueError):
            noise_track(name, paper_params())


class TestMeasuredNoise:
    def test_twenty_points(self, toy_keys):
        pts = measure_noise_points(toy_keys, trials=64, seed=3)
        assert len(pts) == 20 and len({p.name for p in pts}) == 20
        assert all(p.measured_std > 0 and p.tracked_std > 0 for p in pts)

    def test_phase_error_wraps(self):
        assert phase_error(np.array([1], dtype=np.uint64), np.array([2 ** 64 - 1], dtype=np.uint64))[0] == 2.0 ** -63


class TestSweeps:
    def test_deterministic(self, luts):
        a = error_sweep("gelu", points=4000, seed=5, luts=luts)
        b = error_sweep("gelu", points=4000, seed=5, luts=luts)
        assert a.to_dict() == b.to_dict()

    def test_seed_changes_grid(self, luts):
        a = error_sweep("exp_neg", points=4000, seed=1, luts=luts)
        b = error_sweep("exp_neg", points=4000, seed=2, luts=luts)
        assert a.argmax_abs != b.argmax_abs or a.max_abs_error != b.max_abs_error

    def test_report_json(self, luts, tmp_path):
        rep = error_sweep("inv_sqrt", points=4000, luts=luts)
        rep.save(tmp_path / "r.json")
        d = json.loads((tmp_path / "r.json").read_text())
        assert {"function", "grid", "max_abs_error", "max_rel_error", "argmax_abs"} <= set(d)
        assert len(d["segments"]) == 4

    def test_unknown_function(self):
        with pytest.raises(ValueError):
            error_sweep("tanh", points=10)


class TestMirrorEval:
    def test_unknown_op(self):
        with pytest.raises(ValueError):
            mirror_eval("relu", np.zeros(1))

    @pytest.mark.parametrize("op", OPS)
    def test_pbs_counted(self, op, luts):
        x = sample_inputs(op, np.random.default_rng(0), 2, 3)
        assert mirror_eval(op, x, luts).pbs_count > 0

    def test_vector_ops_need_matrix(self):
        with pytest.raises(ValueError):
            split_columns(np.zeros(4), "softmax")
