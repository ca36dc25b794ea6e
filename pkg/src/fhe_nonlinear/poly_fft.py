"""Negacyclic polynomial products over Z[X]/(X^N + 1) through a complex FFT.

A real polynomial of degree < N is folded into N/2 complex points,
``c_j = (a_j + i * a_{j+N/2}) * exp(i*pi*j/N)``, and a length-N/2 complex
FFT evaluates it at the roots of ``X^{N/2} - i``.  Pointwise products in
that domain are negacyclic products in the coefficient domain.

The transform is a self-sorting Stockham FFT that ping-pongs between two
caller-owned buffers.  Arrays are laid out transform-major with the batch
index innermost, shape ``(M, rows)``, so every butterfly touches contiguous
memory across the batch.  Three switchable variants are provided through
:class:`FftConfig`: radix 2 or radix 4 passes, Karatsuba (3-multiply)
complex products, and specialised passes whose twiddles are all in
``{1, -i}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

TWO64 = 18446744073709551616.0
TWO63 = 9223372036854775808.0


@dataclass(frozen=True)
class FftConfig:
    """Variant switches for the FFT path (all variants give identical rounded products)."""

    radix: int = 4
    use_karatsuba: bool = True
    skip_trivial_first_passes: bool = True

    def __post_init__(self):
        if self.radix not in (2, 4):
            raise ValueError(f"radix must be 2 or 4, got {self.radix}")


DEFAULT_FFT = FftConfig()


def all_fft_configs() -> list[FftConfig]:
    return [
        FftConfig(radix=r, use_karatsuba=k, skip_trivial_first_passes=s)
        for r in (2, 4)
        for k in (False, True)
        for s in (False, True)
    ]


# ---------------------------------------------------------------------------
# Twiddle and twist precomputation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FftPass:
    radix: int
    span: int  # size of the already-merged sub-transforms (Ns)
    trivial: bool  # every twiddle of this pass is 1 or -i
    # twiddles[r-1, k] = exp(-2*pi*i*k*r / (span*radix)), split for Karatsuba
    tw_re: np.ndarray
    tw_im: np.ndarray
    tw_dmc: np.ndarray  # im - re
    tw_dpc: np.ndarray  # im + re


class TwistTable:
    """Read-only twist factors and per-pass twiddles for one ring degree ``N``."""

    def __init__(self, n: int):
        if n < 4 or n & (n - 1):
            raise ValueError(f"ring degree must be a power of two >= 4, got {n}")
        self.n = n
        self.m = n // 2
        j = np.arange(n)
        self.twist = np.exp(1j * np.pi * j / n)
        self.twist.setflags(write=False)
        half = self.twist[: self.m]
        self.tw_re = np.ascontiguousarray(half.real)
        self.tw_im = np.ascontiguousarray(half.imag)
        for arr in (self.tw_re, self.tw_im):
            arr.setflags(write=False)
        self._plans: dict[int, tuple[FftPass, ...]] = {}

    def passes(self, radix: int) -> tuple[FftPass, ...]:
        """Pass schedule: radix-4 passes first, one radix-2 pass appended if needed."""
        if radix not in self._plans:
            self._plans[radix] = _build_passes(self.m, radix)
        return self._plans[radix]


def _build_passes(m: int, radix: int) -> tuple[FftPass, ...]:
    log_m = m.bit_length() - 1
    if radix == 2:
        radices = [2] * log_m
    else:
        radices = [4] * (log_m // 2) + [2] * (log_m % 2)
    out = []
    span = 1
    for r in radices:
        k = np.arange(span)
        tw = np.exp(-2j * np.pi * np.outer(np.arange(1, r), k) / (span * r))
        trivial = span == 1 or (r == 2 and span == 2)
        re = np.ascontiguousarray(tw.real)
        im = np.ascontiguousarray(tw.imag)
        p = FftPass(r, span, trivial, re, im, np.ascontiguousarray(im - re), np.ascontiguousarray(im + re))
        for arr in (p.tw_re, p.tw_im, p.tw_dmc, p.tw_dpc):
            arr.setflags(write=False)
        out.append(p)
        span *= r
    return tuple(out)


@lru_cache(maxsize=None)
def twist_table(n: int) -> TwistTable:
    """Shared, cached :class:`TwistTable` for ring degree ``n``."""
    return TwistTable(n)


# ---------------------------------------------------------------------------
# Karatsuba complex product
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _kmul(a, b, c, d):
    """(a+bi)(c+di) with three real multiplications."""
    k1 = c * (a + b)
    k2 = a * (d - c)
    k3 = b * (c + d)
    return k1 - k3, k1 + k2


@njit(cache=True, inline="always")
def _kmul_pre(a, b, c, dmc, dpc):
    """Karatsuba product against a twiddle with precomputed (d-c, d+c)."""
    k1 = c * (a + b)
    k2 = a * dmc
    k3 = b * dpc
    return k1 - k3, k1 + k2


@njit(cache=True, inline="always")
def _nmul(a, b, c, d):
    return a * c - b * d, a * d + b * c


def complex_mul_karatsuba(x: complex, y: complex) -> complex:
    """Complex product with exactly three real multiplications."""
    re, im = _kmul(float(x.real), float(x.imag), float(y.real), float(y.imag))
    return complex(re, im)


@njit(cache=True)
def karatsuba_mul_arrays(xr, xi, yr, yi):
    """Vectorised Karatsuba product, used to check rounding against the naive product."""
    n = xr.shape[0]
    outr = np.empty(n)
    outi = np.empty(n)
    for t in range(n):
        outr[t], outi[t] = _kmul(xr[t], xi[t], yr[t], yi[t])
    return outr, outi


# ---------------------------------------------------------------------------
# Stockham passes, layout (M, rows), batch innermost
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _pass_radix2(src, dst, span, tw_re, tw_im, tw_dmc, tw_dpc, sign, kara, trivial):
    m, rows = src.shape
    half = m // 2
    for j in range(half):
        k = j % span
        base = (j // span) * span * 2 + k
        if trivial:
            # span 1: twiddle 1;  span 2: twiddle 1 or -sign*i
            rot = k == 1
            for r in range(rows):
                a = src[j, r]
                b = src[j + half, r]
                br = b.real
                bi = b.imag
                if rot:
                    # multiply by -i (forward) or +i (inverse)
                    t = br
                    br = -sign * bi
                    bi = sign * t
                dst[base, r] = complex(a.real + br, a.imag + bi)
                dst[base + span, r] = complex(a.real - br, a.imag - bi)
        else:
            c = tw_re[0, k]
            d = -sign * tw_im[0, k]
            if sign < 0:
                dmc = tw_dmc[0, k]
                dpc = tw_dpc[0, k]
            else:
                dmc = d - c
                dpc = d + c
            for r in range(rows):
                a = src[j, r]
                b = src[j + half, r]
                if kara:
                    br, bi = _kmul_pre(b.real, b.imag, c, dmc, dpc)
                else:
                    br, bi = _nmul(b.real, b.imag, c, d)
                dst[base, r] = complex(a.real + br, a.imag + bi)
                dst[base + span, r] = complex(a.real - br, a.imag - bi)


@njit(cache=True, nogil=True)
def _pass_radix4(src, dst, span, tw_re, tw_im, tw_dmc, tw_dpc, sign, kara, trivial):
    m, rows = src.shape
    q = m // 4
    for j in range(q):
        k = j % span
        base = (j // span) * span * 4 + k
        c1 = tw_re[0, k]
        d1 = -sign * tw_im[0, k]
        c2 = tw_re[1, k]
        d2 = -sign * tw_im[1, k]
        c3 = tw_re[2, k]
        d3 = -sign * tw_im[2, k]
        if sign < 0:
            m1 = tw_dmc[0, k]
            p1 = tw_dpc[0, k]
            m2 = tw_dmc[1, k]
            p2 = tw_dpc[1, k]
            m3 = tw_dmc[2, k]
            p3 = tw_dpc[2, k]
        else:
            m1 = d1 - c1
            p1 = d1 + c1
            m2 = d2 - c2
            p2 = d2 + c2
            m3 = d3 - c3
            p3 = d3 + c3
        for r in range(rows):
            a0 = src[j, r]
            a1 = src[j + q, r]
            a2 = src[j + 2 * q, r]
            a3 = src[j + 3 * q, r]
            x0r = a0.real
            x0i = a0.imag
            if trivial:
                x1r = a1.real
                x1i = a1.imag
                x2r = a2.real
                x2i = a2.imag
                x3r = a3.real
                x3i = a3.imag
            elif kara:
                x1r, x1i = _kmul_pre(a1.real, a1.imag, c1, m1, p1)
                x2r, x2i = _kmul_pre(a2.real, a2.imag, c2, m2, p2)
                x3r, x3i = _kmul_pre(a3.real, a3.imag, c3, m3, p3)
            else:
                x1r, x1i = _nmul(a1.real, a1.imag, c1, d1)
                x2r, x2i = _nmul(a2.real, a2.imag, c2, d2)
                x3r, x3i = _nmul(a3.real, a3.imag, c3, d3)
            t0r = x0r + x2r
            t0i = x0i + x2i
            t1r = x0r - x2r
            t1i = x0i - x2i
            t2r = x1r + x3r
            t2i = x1i + x3i
            # t3 = (x1 - x3) * (-sign*i)
            ur = x1r - x3r
            ui = x1i - x3i
            t3r = -sign * ui
            t3i = sign * ur
            dst[base, r] = complex(t0r + t2r, t0i + t2i)
            dst[base + span, r] = complex(t1r + t3r, t1i + t3i)
            dst[base + 2 * span, r] = complex(t0r - t2r, t0i - t2i)
            dst[base + 3 * span, r] = complex(t1r - t3r, t1i - t3i)


def _run_passes(x, scratch, table: TwistTable, cfg: FftConfig, sign: int):
    m = x.shape[0]
    if m != table.m:
        raise ValueError(f"transform length {m} does not match table length {table.m}")
    src, dst = x, scratch
    for p in table.passes(cfg.radix):
        trivial = p.trivial and cfg.skip_trivial_first_passes
        fn = _pass_radix2 if p.radix == 2 else _pass_radix4
        fn(src, dst, p.span, p.tw_re, p.tw_im, p.tw_dmc, p.tw_dpc, float(sign), cfg.use_karatsuba, trivial)
        src, dst = dst, src
    if src is not x:
        x[...] = src


def _check_len(m: int):
    if m < 1 or m & (m - 1):
        raise ValueError(f"FFT length must be a power of two, got {m}")


def forward_fft(values: np.ndarray, cfg: FftConfig = DEFAULT_FFT, scratch: np.ndarray | None = None) -> np.ndarray:
    """Unnormalised forward DFT (kernel ``exp(-2*pi*i*jk/M)``) along axis 0.

    ``values`` has shape ``(M,)`` or ``(M, rows)``.  A new array is returned;
    pass ``scratch`` of the same shape to avoid one allocation.
    """
    return _transform(values, cfg, scratch, -1)


def inverse_fft(values: np.ndarray, cfg: FftConfig = DEFAULT_FFT, scratch: np.ndarray | None = None) -> np.ndarray:
    """Inverse DFT along axis 0, including the ``1/M`` normalisation."""
    out = _transform(values, cfg, scratch, +1)
    out /= out.shape[0]
    return out


def _transform(values, cfg, scratch, sign):
    v = np.asarray(values, dtype=np.complex128)
    one_d = v.ndim == 1
    x = np.array(v.reshape(v.shape[0], -1), dtype=np.complex128, order="C", copy=True)
    _check_len(x.shape[0])
    if x.shape[0] >= 2:
        if scratch is None:
            scratch = np.empty_like(x)
        fft_inplace(x, scratch, twist_table(2 * x.shape[0]), cfg, sign)
    return x[:, 0] if one_d else x


def fft_inplace(x: np.ndarray, scratch: np.ndarray, table: TwistTable, cfg: FftConfig, sign: int) -> None:
    """In-place transform of ``x`` (shape ``(M, rows)``) using caller scratch.

    ``sign=-1`` is the forward transform, ``sign=+1`` the unnormalised inverse.
    """
    if x.shape[0] >= 2:
        _run_passes(x, scratch, table, cfg, sign)


# ---------------------------------------------------------------------------
# Fold/twist and the inverse with modular rounding
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def fold_twist(polys, tw_re, tw_im, out):
    """out[j, r] = (p[r, j] + i p[r, j+M]) * twist[j]; ``polys`` is (rows, N) float or int."""
    rows, n = polys.shape
    m = n // 2
    for j in range(m):
        c = tw_re[j]
        d = tw_im[j]
        for r in range(rows):
            a = float(polys[r, j])
            b = float(polys[r, j + m])
            out[j, r] = complex(a * c - b * d, a * d + b * c)


@njit(cache=True, inline="always")
def _to_u64(x):
    y = x - TWO64 * np.floor(x / TWO64 + 0.5)
    y = np.rint(y)
    if y >= TWO63:
        y -= TWO64
    elif y < -TWO63:
        y += TWO64
    return np.uint64(np.int64(y))


@njit(cache=True, nogil=True)
def untwist_round(spec, tw_re, tw_im, out):
    """Inverse of :func:`fold_twist` after an unnormalised inverse FFT.

    Writes the rounded coefficients reduced mod 2^64 into ``out`` (rows, N).
    """
    m, rows = spec.shape
    scale = 1.0 / m
    for j in range(m):
        c = tw_re[j] * scale
        d = -tw_im[j] * scale
        for r in range(rows):
            v = spec[j, r]
            re = v.real * c - v.imag * d
            im = v.real * d + v.imag * c
            out[r, j] = _to_u64(re)
            out[r, j + m] = _to_u64(im)


@njit(cache=True, nogil=True)
def untwist_round_add(spec, tw_re, tw_im, acc):
    """Like :func:`untwist_round` but adds the result into ``acc`` (wrapping)."""
    m, rows = spec.shape
    scale = 1.0 / m
    for j in range(m):
        c = tw_re[j] * scale
        d = -tw_im[j] * scale
        for r in range(rows):
            v = spec[j, r]
            re = v.real * c - v.imag * d
            im = v.real * d + v.imag * c
            acc[r, j] += _to_u64(re)
            acc[r, j + m] += _to_u64(im)


@njit(cache=True, nogil=True)
def pointwise_mul(x, y, out, kara):
    """out = x * y elementwise over (M, rows) arrays."""
    m, rows = x.shape
    for j in range(m):
        for r in range(rows):
            a = x[j, r]
            b = y[j, r]
            if kara:
                re, im = _kmul(a.real, a.imag, b.real, b.imag)
            else:
                re, im = _nmul(a.real, a.imag, b.real, b.imag)
            out[j, r] = complex(re, im)


@njit(cache=True, nogil=True)
def mac_fourier(x, key, out, kara):
    """Fourier-domain multiply-accumulate for external products.

    ``x``: (M, B*R) decomposed input rows, row index ``b*R + r``.
    ``key``: (M, R, C) Fourier key rows.  ``out``: (M, B*C), row ``b*C + c``.
    Accumulation order is fixed per output row, so results do not depend on B.
    """
    m = x.shape[0]
    nr = key.shape[1]
    nc = key.shape[2]
    nb = x.shape[1] // nr
    for j in range(m):
        for b in range(nb):
            for c in range(nc):
                sr = 0.0
                si = 0.0
                for r in range(nr):
                    a = x[j, b * nr + r]
                    k = key[j, r, c]
                    if kara:
                        pr, pi = _kmul(a.real, a.imag, k.real, k.imag)
                    else:
                        pr, pi = _nmul(a.real, a.imag, k.real, k.imag)
                    sr += pr
                    si += pi
                out[j, b * nc + c] = complex(sr, si)


# ---------------------------------------------------------------------------
# Public negacyclic products
# ---------------------------------------------------------------------------


def max_exact_bits(n: int) -> int:
    """Largest B such that |a|,|b| < 2^B keeps the FFT product exactly roundable.

    Uses the bound N * 2^(2B) * eps < 1/4 with eps = 2^-53, with one bit of
    extra margin for accumulated FFT roundoff.
    """
    log_n = n.bit_length() - 1
    return (53 - 2 - log_n - 1) // 2


def to_fourier(polys: np.ndarray, cfg: FftConfig = DEFAULT_FFT) -> np.ndarray:
    """Fold, twist and transform rows of ``polys`` (rows, N) -> (M, rows)."""
    polys = np.atleast_2d(polys)
    n = polys.shape[1]
    tab = twist_table(n)
    out = np.empty((n // 2, polys.shape[0]), dtype=np.complex128)
    fold_twist(polys, tab.tw_re, tab.tw_im, out)
    fft_inplace(out, np.empty_like(out), tab, cfg, -1)
    return out


def from_fourier(spec: np.ndarray, cfg: FftConfig = DEFAULT_FFT) -> np.ndarray:
    """Inverse of :func:`to_fourier` with rounding mod 2^64 -> uint64 (rows, N)."""
    spec = np.array(spec, dtype=np.complex128, copy=True)
    m, rows = spec.shape
    tab = twist_table(2 * m)
    fft_inplace(spec, np.empty_like(spec), tab, cfg, +1)
    out = np.empty((rows, 2 * m), dtype=np.uint64)
    untwist_round(spec, tab.tw_re, tab.tw_im, out)
    return out


def negacyclic_mul(a, b, cfg: FftConfig = DEFAULT_FFT, twist: TwistTable | None = None) -> np.ndarray:
    """Exact negacyclic product of integer polynomials, reduced mod 2^64.

    ``a`` and ``b`` are length-N integer vectors (or (rows, N) batches that
    broadcast against each other).  Coefficients must satisfy
    ``|coeff| < 2**max_exact_bits(N)``; callers guarantee this by gadget
    decomposition or limb splitting.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    one_d = a.ndim == 1 and b.ndim == 1
    a2 = np.atleast_2d(a).astype(np.float64)
    b2 = np.atleast_2d(b).astype(np.float64)
    a2, b2 = np.broadcast_arrays(a2, b2)
    a2 = np.ascontiguousarray(a2)
    b2 = np.ascontiguousarray(b2)
    n = a2.shape[1]
    tab = twist if twist is not None else twist_table(n)
    if tab.n != n:
        raise ValueError("twist table degree does not match the polynomials")
    fa = to_fourier(a2, cfg)
    fb = to_fourier(b2, cfg)
    prod = np.empty_like(fa)
    pointwise_mul(fa, fb, prod, cfg.use_karatsuba)
    out = from_fourier(prod, cfg)
    return out[0] if one_d else out


def _signed_u64(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.uint64).view(np.int64)


def negacyclic_mul_u64(big, small, cfg: FftConfig = DEFAULT_FFT) -> np.ndarray:
    """Exact product mod 2^64 of arbitrary uint64 polynomials with small integer ones.

    ``big`` is split into four 16-bit limbs so every limb product is exactly
    roundable; ``small`` must have |coeff| <= 2^8 (binary keys, digits).
    Works on (rows, N) batches with broadcasting.
    """
    big = np.atleast_2d(np.asarray(big, dtype=np.uint64))
    small = np.atleast_2d(np.asarray(small))
    n = big.shape[-1]
    if int(np.max(np.abs(small.astype(np.int64)), initial=0)) > 256:
        raise ValueError("second operand exceeds the small-coefficient bound")
    cap = max_exact_bits(n)
    if 16 + 8 + (n.bit_length() - 1) > 52 or cap < 8:
        raise ValueError("ring degree too large for exact limb products")
    big_b, small_b = np.broadcast_arrays(big, small)
    rows_shape = big_b.shape[:-1]
    big2 = np.ascontiguousarray(big_b.reshape(-1, n))
    small2 = np.ascontiguousarray(small_b.reshape(-1, n)).astype(np.float64)
    tab = twist_table(n)
    fs = to_fourier(small2, cfg)
    acc = np.zeros(big2.shape, dtype=np.uint64)
    prod = np.empty_like(fs)
    for limb in range(4):
        part = ((big2 >> np.uint64(16 * limb)) & np.uint64(0xFFFF)).astype(np.float64)
        fp = to_fourier(part, cfg)
        pointwise_mul(fp, fs, prod, cfg.use_karatsuba)
        fft_inplace(prod, np.empty_like(prod), tab, cfg, +1)
        res = np.empty_like(acc)
        untwist_round(prod, tab.tw_re, tab.tw_im, res)
        acc += res << np.uint64(16 * limb)
    return acc.reshape(rows_shape + (n,))


def negacyclic_mul_schoolbook(a, b) -> np.ndarray:
    """Reference O(N^2) negacyclic product with wrapping 64-bit arithmetic."""
    a = np.asarray(a).astype(np.int64).view(np.uint64)
    b = np.asarray(b).astype(np.int64).view(np.uint64)
    n = a.shape[0]
    out = np.zeros(n, dtype=np.uint64)
    for i in range(n):
        if a[i] == 0:
            continue
        rolled = np.roll(b, i)
        rolled[:i] = np.uint64(0) - rolled[:i]
        out += a[i] * rolled
    return out


def naive_dft(x: np.ndarray) -> np.ndarray:
    """Direct O(M^2) forward DFT, the reference for :func:`forward_fft`."""
    x = np.asarray(x, dtype=np.complex128)
    m = x.shape[0]
    k = np.arange(m)
    w = np.exp(-2j * np.pi * np.outer(k, k) / m)
    return w @ x
