import numpy as np
import pytest

from fhe_nonlinear.batch import Scheduler
from fhe_nonlinear.boot import cmux
from fhe_nonlinear.torus import (
    ConfigurationError,
    LweCiphertext,
    decrypt_glwe,
    decrypt_lwe,
    encode,
    encrypt_glwe,
    encrypt_lwe,
)
from fhe_nonlinear.wop import (
    MAX_INPUT_BITS,
    LookupTable,
    check_input_bits,
    circuit_bootstrap,
    extract_bits,
    wop_pbs,
)


def _blocks(keys, m, rng):
    """Level-1 encryptions of a block message (4 message bits under one padding bit)."""
    return encrypt_lwe(encode(m, 5), keys.lwe1, keys.params.sigma_l1, rng)


def _radix(values, blocks):
    return [(np.asarray(values) >> (2 * i)) & 3 for i in range(blocks)]


class TestExtractBits:
    def test_exhaustive_four_bits(self, toy_keys, rng):
        m = np.arange(16)
        ext = extract_bits(_blocks(toy_keys, m, rng), 4, toy_keys)
        assert ext.width == 4 and ext.bits.level == 0
        got = decrypt_lwe(ext.bits, toy_keys.lwe0, 1)  # (4, 16), MSB first
        want = np.stack([(m >> (3 - i)) & 1 for i in range(4)])
        assert np.array_equal(got, want)

    def test_rejects_width_beyond_message(self, toy_keys, rng):
        with pytest.raises(ConfigurationError):
            extract_bits(_blocks(toy_keys, np.array([1]), rng), 6, toy_keys)

    def test_rejects_level_zero(self, toy_keys):
        ct = LweCiphertext(np.zeros((1, toy_keys.params.n0 + 1), dtype=np.uint64), 0)
        with pytest.raises(ValueError):
            extract_bits(ct, 2, toy_keys)


class TestCircuitBootstrap:
    def test_selects_through_cmux_50_trials(self, toy_keys, rng):
        p = toy_keys.params
        bits = rng.integers(0, 2, 50)
        lvl0 = encrypt_lwe(encode(bits, 1), toy_keys.lwe0, p.sigma_l0, rng)
        sched = Scheduler(toy_keys)
        for i, b in enumerate(bits):
            g = circuit_bootstrap(LweCiphertext(lvl0.data[i], 0), toy_keys, sched)
            m0, m1 = rng.integers(0, 4, (2, p.n1_poly))
            d0 = encrypt_glwe(encode(m0, 2), toy_keys.glwe1, p.sigma_l1, rng)
            d1 = encrypt_glwe(encode(m1, 2), toy_keys.glwe1, p.sigma_l1, rng)
            assert np.array_equal(decrypt_glwe(cmux(g, d0, d1), toy_keys.glwe1, 2), m1 if b else m0)

    def test_rejects_non_level0(self, toy_keys):
        ct = LweCiphertext(np.zeros(toy_keys.params.n1 + 1, dtype=np.uint64), 1)
        with pytest.raises(ValueError):
            circuit_bootstrap(ct, toy_keys)


class TestVerticalPacking:
    def test_random_eight_bit_table(self, toy_keys, rng):
        table = LookupTable(8, (8,), rng.integers(0, 256, 256).astype(np.uint64))
        idx = rng.integers(0, 256, 6)
        cts = [_blocks(toy_keys, d, rng) for d in _radix(idx, 4)]
        out = wop_pbs(cts, table, toy_keys)
        got = sum(decrypt_lwe(o, toy_keys.lwe1, 5).astype(np.int64) << (2 * i) for i, o in enumerate(out))
        assert np.array_equal(got, table.lookup(idx)[0].astype(np.int64))

    def test_joint_table_two_outputs(self, toy_keys, rng):
        table = LookupTable.from_function(4, (4, 2), lambda i: ((i * 3) % 16, i % 4))
        idx = np.arange(16)
        cts = [_blocks(toy_keys, d, rng) for d in _radix(idx, 2)]
        out = wop_pbs(cts, table, toy_keys)
        assert len(out) == table.block_count == 3
        first = decrypt_lwe(out[0], toy_keys.lwe1, 5) + (decrypt_lwe(out[1], toy_keys.lwe1, 5) << 2)
        assert np.array_equal(first, (idx * 3) % 16)
        assert np.array_equal(decrypt_lwe(out[2], toy_keys.lwe1, 5), idx % 4)

    def test_uneven_block_widths(self, toy_keys, rng):
        table = LookupTable.from_function(5, 5, lambda i: 31 - i)
        idx = np.arange(32)
        cts = [_blocks(toy_keys, idx & 7, rng), _blocks(toy_keys, idx >> 3, rng)]
        out = wop_pbs(cts, table, toy_keys, widths=[3, 2])
        got = sum(decrypt_lwe(o, toy_keys.lwe1, 5) << (2 * i) for i, o in enumerate(out))
        assert np.array_equal(got, 31 - idx)

    def test_width_mismatch(self, toy_keys, rng):
        table = LookupTable.from_function(4, 2, lambda i: i % 4)
        with pytest.raises(ValueError):
            wop_pbs([_blocks(toy_keys, np.array([1]), rng)], table, toy_keys)


class TestInputLimit:
    def test_limit_is_24_bits(self):
        assert MAX_INPUT_BITS == 24
        check_input_bits(24)

    @pytest.mark.parametrize("bits", [25, 32])
    def test_rejects_wider_lookups(self, bits):
        with pytest.raises(ConfigurationError):
            check_input_bits(bits)


class TestLookupTable:
    def test_serialization_roundtrip(self, tmp_path, rng):
        table = LookupTable(6, (7, 3), rng.integers(0, 8, (2, 64)).astype(np.uint64))
        again = LookupTable.from_bytes(table.to_bytes())
        assert again.output_bits == (7, 3) and np.array_equal(again.values, table.values)
        table.save(tmp_path / "t.tgr")
        assert np.array_equal(LookupTable.load(tmp_path / "t.tgr").values, table.values)

    def test_block_digits(self):
        table = LookupTable.from_function(2, 6, lambda i: np.array([0b110110, 1, 2, 3])[i])
        assert table.blocks_per_entry() == [3]
        assert [int(table.block_digits(b)[0]) for b in range(3)] == [2, 1, 3]
        with pytest.raises(IndexError):
            table.block_digits(3)

    def test_rejects_values_wider_than_declared(self):
        with pytest.raises(ConfigurationError):
            LookupTable(2, (2,), np.array([0, 1, 2, 4], dtype=np.uint64))

    def test_rejects_wrong_shape(self):
        with pytest.raises(ConfigurationError):
            LookupTable(3, (2,), np.zeros(4, dtype=np.uint64))
