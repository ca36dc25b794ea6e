import io
import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fhe_nonlinear.torus import (
    ConfigurationError,
    GadgetParams,
    GlweCiphertext,
    LweCiphertext,
    ParameterSet,
    decode,
    decrypt_ggsw_bit,
    decrypt_glwe,
    decrypt_lwe,
    encode,
    encrypt_ggsw,
    encrypt_glwe,
    encrypt_lwe,
    gadget_decompose,
    gadget_recompose,
    keygen,
    load_keys,
    load_lwe,
    load_preset,
    lwe_from_bytes,
    lwe_phase,
    lwe_to_bytes,
    paper_params,
    read_record,
    save_keys,
    save_lwe,
    toy_params,
    trivial_lwe,
)

U64 = np.uint64


def _signed_error(recomposed, values):
    return np.abs((recomposed - np.asarray(values, dtype=U64)).view(np.int64).astype(np.float64))


class TestParameterSet:
    def test_paper_preset_dimensions(self):
        p = paper_params()
        assert (p.n0, p.n1_poly, p.n2_poly, p.k) == (500, 1024, 2048, 1)
        assert (p.bk_cmux.base_log, p.bk_cmux.length) == (6, 3)

    def test_presets_shipped_as_json_match_builders(self):
        root = resources.files("fhe_nonlinear") / "presets"
        for name, builder in (("paper", paper_params), ("toy", toy_params)):
            shipped = ParameterSet.from_dict(json.loads((root / f"{name}.json").read_text()))
            assert shipped == builder()

    def test_json_roundtrip(self, tmp_path):
        path = tmp_path / "p.json"
        toy_params().to_json(path)
        assert load_preset(str(path)) == toy_params()

    def test_rejects_non_power_of_two(self):
        d = toy_params().to_dict()
        d["n1_poly"] = 300
        with pytest.raises(ConfigurationError):
            ParameterSet.from_dict(d)

    def test_rejects_oversized_gadget(self):
        d = toy_params().to_dict()
        d["bk_l2"] = {"base_log": 20, "length": 4, "sigma": 1e-10}
        with pytest.raises(ConfigurationError):
            ParameterSet.from_dict(d)

    def test_rejects_sigma_out_of_range(self):
        with pytest.raises(ConfigurationError):
            GadgetParams(4, 4, 1.5).validate("x")


class TestGadget:
    def test_zero_gives_zero_digits(self):
        assert not gadget_decompose(np.zeros(3, dtype=U64), 4, 6).any()

    def test_half_is_exact(self):
        v = np.array([1 << 63], dtype=U64)
        d = gadget_decompose(v, 9, 6)
        assert gadget_recompose(d, 9)[0] == v[0]

    def test_random_error_bound(self, rng):
        v = rng.integers(0, 2**64, 100_000, dtype=U64)
        d = gadget_decompose(v, 4, 6)
        assert d.min() >= -8 and d.max() < 8
        assert _signed_error(gadget_recompose(d, 4), v).max() < 2.0**39

    @given(st.integers(0, 2**64 - 1), st.sampled_from([(1, 14), (2, 7), (4, 6), (6, 3), (9, 6), (16, 3), (8, 8)]))
    @settings(max_examples=300, deadline=None)
    def test_digits_and_reconstruction(self, value, gadget):
        base_log, length = gadget
        d = gadget_decompose(np.array([value], dtype=U64), base_log, length)
        half = 1 << (base_log - 1)
        assert d.min() >= -half and d.max() < half
        err = _signed_error(gadget_recompose(d, base_log), [value])[0]
        assert err <= 2.0 ** (63 - base_log * length)


class TestLwe:
    def test_zero_roundtrip(self, toy_keys, rng):
        ct = encrypt_lwe(encode(np.zeros(5, dtype=np.int64), 2), toy_keys.lwe1, toy_keys.params.sigma_l1, rng)
        assert (decrypt_lwe(ct, toy_keys.lwe1, 2) == 0).all()

    def test_additivity(self, toy_keys, rng):
        a, b = rng.integers(0, 16, 200), rng.integers(0, 16, 200)
        key, s = toy_keys.lwe1, toy_keys.params.sigma_l1
        ct = encrypt_lwe(encode(a, 4), key, s, rng) + encrypt_lwe(encode(b, 4), key, s, rng)
        assert (decrypt_lwe(ct, key, 4) == (a + b) % 16).all()

    @pytest.mark.parametrize("level", [0, 1, 2])
    def test_paper_roundtrip_every_level(self, paper_keys, rng, level):
        m = rng.integers(0, 4, 1000)
        key = paper_keys.lwe_key(level)
        ct = encrypt_lwe(encode(m, 2), key, paper_keys.params.sigma(level), rng)
        assert (decrypt_lwe(ct, key, 2) == m).all()

    def test_trivial_ciphertext_decrypts_to_message(self, toy_keys):
        ct = trivial_lwe(encode(np.array([3]), 2), toy_keys.params.n1, 1)
        assert decrypt_lwe(ct, toy_keys.lwe1, 2)[0] == 3

    def test_decode_rounds_to_nearest(self):
        words = encode(np.array([1, 2]), 3) + U64(1 << 59)
        assert (decode(words, 3) == [1, 2]).all()

    def test_serialization_roundtrip(self, toy_keys, rng, tmp_path):
        ct = encrypt_lwe(encode(rng.integers(0, 4, 7), 2), toy_keys.lwe1, 1e-9, rng)
        again = lwe_from_bytes(lwe_to_bytes(ct))
        assert again.level == 1 and np.array_equal(again.data, ct.data)
        save_lwe(tmp_path / "c.tgr", ct)
        assert np.array_equal(load_lwe(tmp_path / "c.tgr").data, ct.data)
        raw = (tmp_path / "c.tgr").read_bytes()
        assert raw[:4] == b"TGR1"
        kind, level, _, words = read_record(io.BytesIO(raw))
        assert (kind, level, words.shape) == ("lwe", 1, ct.data.shape)


class TestGlweGgsw:
    def test_glwe_roundtrip(self, toy_keys, rng):
        m = rng.integers(0, 4, toy_keys.params.n1_poly)
        ct = encrypt_glwe(encode(m, 2), toy_keys.glwe1, toy_keys.params.sigma_l1, rng)
        assert isinstance(ct, GlweCiphertext)
        assert (decrypt_glwe(ct, toy_keys.glwe1, 2) == m).all()

    @pytest.mark.parametrize("bit", [0, 1])
    def test_ggsw_bit_roundtrip(self, toy_keys, rng, bit):
        g = encrypt_ggsw(bit, toy_keys.glwe1, toy_keys.params.bk_cmux, rng)
        assert g.data.shape[-3] == (toy_keys.params.k + 1) * toy_keys.params.bk_cmux.length
        assert int(np.asarray(decrypt_ggsw_bit(g, toy_keys.glwe1)).reshape(-1)[0]) == bit


class TestKeygen:
    def test_deterministic(self):
        a, b = keygen(toy_params(), seed=7), keygen(toy_params(), seed=7)
        assert np.array_equal(a.lwe0.bits, b.lwe0.bits)
        assert np.array_equal(a.bk_gpbs.ggsw, b.bk_gpbs.ggsw)
        assert np.array_equal(a.pfks.matrix.words, b.pfks.matrix.words)

    def test_seed_changes_keys(self):
        a, b = keygen(toy_params(), seed=7), keygen(toy_params(), seed=8)
        assert not np.array_equal(a.bk_gpbs.ggsw, b.bk_gpbs.ggsw)

    def test_paper_preset_dimensions(self, paper_keys):
        assert paper_keys.lwe0.bits.shape == (500,)
        assert paper_keys.glwe1.polys.shape[-1] == 1024
        assert paper_keys.glwe2.polys.shape[-1] == 2048

    def test_save_load(self, toy_keys, tmp_path, rng):
        sizes = save_keys(toy_keys, tmp_path)
        assert all(v > 0 for v in sizes.values())
        again = load_keys(tmp_path)
        assert again.params == toy_keys.params
        assert np.array_equal(again.ksk_gpbs.matrix.words, toy_keys.ksk_gpbs.matrix.words)
        ct = encrypt_lwe(encode(np.arange(4), 2), toy_keys.lwe1, 1e-12, rng)
        assert np.array_equal(lwe_phase(ct, again.lwe1), lwe_phase(ct, toy_keys.lwe1))

    def test_ciphertext_level_mismatch(self, toy_keys):
        a = LweCiphertext(np.zeros(5, dtype=U64), 0)
        b = LweCiphertext(np.zeros(5, dtype=U64), 1)
        with pytest.raises(ValueError):
            a + b
