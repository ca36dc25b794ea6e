import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fhe_nonlinear.poly_fft import (
    FftConfig,
    all_fft_configs,
    complex_mul_karatsuba,
    forward_fft,
    inverse_fft,
    karatsuba_mul_arrays,
    max_exact_bits,
    naive_dft,
    negacyclic_mul,
    negacyclic_mul_schoolbook,
    negacyclic_mul_u64,
    twist_table,
)

CONFIGS = all_fft_configs()


def test_eight_distinct_configs():
    assert len({(c.radix, c.use_karatsuba, c.skip_trivial_first_passes) for c in CONFIGS}) == 8


def test_radix_validation():
    with pytest.raises(ValueError):
        FftConfig(radix=8)


def test_twist_factors():
    tab = twist_table(16)
    assert np.allclose(tab.twist, np.exp(1j * np.pi * np.arange(16) / 16))
    assert not tab.twist.flags.writeable


@pytest.mark.parametrize("cfg", CONFIGS)
class TestTransforms:
    def test_zeros(self, cfg):
        assert not forward_fft(np.zeros(64), cfg).any()

    def test_delta_gives_constant(self, cfg):
        x = np.zeros(128, dtype=complex)
        x[0] = 1
        assert np.allclose(forward_fft(x, cfg), 1.0)

    @pytest.mark.parametrize("m", [2, 8, 32, 512])
    def test_matches_naive_dft(self, cfg, m, rng):
        x = rng.normal(size=m) + 1j * rng.normal(size=m)
        ref = naive_dft(x)
        assert np.abs(forward_fft(x, cfg) - ref).max() <= 1e-10 * np.abs(ref).max()

    def test_inverse_roundtrip(self, cfg, rng):
        x = rng.normal(size=(1024, 3)) + 1j * rng.normal(size=(1024, 3))
        back = inverse_fft(forward_fft(x, cfg), cfg)
        assert np.abs(back - x).max() <= 1e-10 * np.abs(x).max()

    def test_identity_polynomial(self, cfg, rng):
        b = rng.integers(-1000, 1000, 256)
        one = np.zeros(256, dtype=np.int64)
        one[0] = 1
        assert np.array_equal(negacyclic_mul(one, b, cfg), b.astype(np.int64).view(np.uint64))

    def test_wraparound(self, cfg):
        n = 64
        x = np.zeros(n, dtype=np.int64)
        x[1] = 1
        y = np.zeros(n, dtype=np.int64)
        y[n - 1] = 1
        out = negacyclic_mul(x, y, cfg).view(np.int64)
        assert out[0] == -1 and not out[1:].any()


def test_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        forward_fft(np.zeros(12))


def test_radix_variants_agree(rng):
    x = rng.normal(size=2048) + 1j * rng.normal(size=2048)
    a = forward_fft(x, FftConfig(radix=2))
    b = forward_fft(x, FftConfig(radix=4))
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()


@pytest.mark.parametrize("n", [256, 1024, 2048])
def test_bound_stays_exact(n, rng):
    bits = max_exact_bits(n)
    a = rng.integers(-(2**bits) + 1, 2**bits, (4, n))
    b = rng.integers(-(2**bits) + 1, 2**bits, (4, n))
    out = negacyclic_mul(a, b)
    for i in range(4):
        assert np.array_equal(out[i], negacyclic_mul_schoolbook(a[i], b[i]))


@given(st.lists(st.integers(-(2**15), 2**15), min_size=32, max_size=32),
       st.lists(st.integers(-(2**15), 2**15), min_size=32, max_size=32),
       st.lists(st.integers(-(2**15), 2**15), min_size=32, max_size=32))
@settings(max_examples=50, deadline=None)
def test_linearity(a, a2, b):
    a, a2, b = (np.array(v, dtype=np.int64) for v in (a, a2, b))
    lhs = negacyclic_mul(a + a2, b)
    assert np.array_equal(lhs, negacyclic_mul(a, b) + negacyclic_mul(a2, b))


def test_u64_limb_product_matches_schoolbook(rng):
    n = 512
    big = rng.integers(0, 2**64, n, dtype=np.uint64)
    small = rng.integers(-128, 129, n)
    assert np.array_equal(negacyclic_mul_u64(big, small)[0], negacyclic_mul_schoolbook(big.view(np.int64), small))


def test_u64_rejects_large_small_operand(rng):
    with pytest.raises(ValueError):
        negacyclic_mul_u64(np.zeros(16, dtype=np.uint64), np.full(16, 1000))


class TestKaratsuba:
    def test_identity_and_i_squared(self):
        y = complex(3.5, -2.0)
        assert complex_mul_karatsuba(1 + 0j, y) == y
        assert complex_mul_karatsuba(1j, 1j) == -1

    def test_million_pairs_within_4_ulp(self, rng):
        n = 1_000_000
        xr, xi, yr, yi = (rng.uniform(-1, 1, n) for _ in range(4))
        kr, ki = karatsuba_mul_arrays(xr, xi, yr, yi)
        nr, ni = xr * yr - xi * yi, xr * yi + xi * yr
        scale = np.spacing(np.maximum(np.abs(xr * yr) + np.abs(xi * yi), np.abs(xr * yi) + np.abs(xi * yr)))
        assert (np.abs(kr - nr) / scale).max() <= 4
        assert (np.abs(ki - ni) / scale).max() <= 4
