"""Key switching, external products, CMux, blind rotation, sample extraction and PBS.

Everything works on batches: an LWE batch is an array ``(B, n + 1)`` and a
GLWE batch ``(B, k + 1, N)``.  Blind rotation keeps one accumulator per
batch row and applies the same bootstrap-key GGSW to every row at each
step, so the Fourier-domain multiply-accumulate runs over the whole batch.
Every row is computed with a fixed operation order, so a row's result does
not depend on which other rows share its batch.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .poly_fft import (
    DEFAULT_FFT,
    FftConfig,
    fft_inplace,
    mac_fourier,
    twist_table,
    untwist_round_add,
)
from .torus import (
    U64,
    BootstrapKey,
    ConfigurationError,
    GgswCiphertext,
    GlweCiphertext,
    KeyBundle,
    KeySwitchKey,
    LweCiphertext,
    gadget_decompose,
)

# ---------------------------------------------------------------------------
# Key switching
# ---------------------------------------------------------------------------


def keyswitch_raw(data: np.ndarray, ksk: KeySwitchKey) -> np.ndarray:
    """Key-switch an LWE batch ``(B, n_in + 1)`` -> ``(B, n_out + 1)``."""
    g = ksk.gadget
    mask = data[:, :-1]
    digits = gadget_decompose(mask, g.base_log, g.length).reshape(data.shape[0], -1)
    out = ksk.matrix.dot(digits, 1 << (g.base_log - 1))
    out = U64(0) - out
    out[:, -1] += data[:, -1]
    return out


def keyswitch(ct: LweCiphertext, ksk: KeySwitchKey) -> LweCiphertext:
    """Switch ``ct`` from ``ksk.in_level`` to ``ksk.out_level``."""
    if ct.level != ksk.in_level:
        raise ValueError(f"key switch expects level {ksk.in_level}, got {ct.level}")
    lead = ct.data.shape[:-1]
    flat = ct.data.reshape(-1, ct.data.shape[-1])
    out = keyswitch_raw(flat, ksk)
    return LweCiphertext(out.reshape(lead + (out.shape[-1],)), ksk.out_level)


# ---------------------------------------------------------------------------
# Modulus switching and test polynomials
# ---------------------------------------------------------------------------


def modulus_switch(words: np.ndarray, n: int) -> np.ndarray:
    """round(x * 2N / 2^64) mod 2N with round half up, as int64."""
    log2n = (2 * n).bit_length() - 1
    x = np.asarray(words, dtype=U64)
    t = x >> U64(64 - log2n - 1)
    return (((t + U64(1)) >> U64(1)) & U64(2 * n - 1)).astype(np.int64)


def test_polynomial(outputs: np.ndarray, n: int) -> np.ndarray:
    """Redundant LUT polynomial for a padded message space of ``len(outputs)`` values.

    ``outputs`` holds the torus words to return for each message.  Messages
    are encoded at ``m * 2^64 / (2 * len(outputs))`` so the top bit is the
    padding bit.  Each message owns a window of ``N / len(outputs)``
    coefficients centred on its nominal position; the window of message 0
    straddles index 0, so its lower half sits negated at the top of the
    polynomial.
    """
    outputs = np.asarray(outputs, dtype=U64)
    size = outputs.shape[0]
    if size & (size - 1) or size > n:
        raise ConfigurationError("message space must be a power of two not exceeding N")
    box = n // size
    j = np.arange(n)
    idx = (j + box // 2) // box
    poly = outputs[np.minimum(idx, size - 1)].copy()
    if box >= 2:
        poly[n - box // 2:] = U64((-int(outputs[0])) % 2**64)
    return poly


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _rotate_sub(acc, rots, out):
    """out[b] = X^rots[b] * acc[b] - acc[b] (negacyclic)."""
    nb, nc, n = acc.shape
    for b in range(nb):
        r = rots[b]
        neg = r >= n
        if neg:
            r -= n
        for c in range(nc):
            for j in range(n):
                src = j - r
                if src >= 0:
                    v = acc[b, c, src]
                    if neg:
                        v = np.uint64(0) - v
                else:
                    v = acc[b, c, src + n]
                    if not neg:
                        v = np.uint64(0) - v
                out[b, c, j] = v - acc[b, c, j]


@njit(cache=True, nogil=True)
def _rotate(acc, rots, out):
    """out[b] = X^rots[b] * acc[b] (negacyclic), rots in [0, 2N)."""
    nb, nc, n = acc.shape
    for b in range(nb):
        r = rots[b]
        neg = r >= n
        if neg:
            r -= n
        for c in range(nc):
            for j in range(n):
                src = j - r
                if src >= 0:
                    v = acc[b, c, src]
                    if neg:
                        v = np.uint64(0) - v
                else:
                    v = acc[b, c, src + n]
                    if not neg:
                        v = np.uint64(0) - v
                out[b, c, j] = v


@njit(cache=True, nogil=True)
def _decompose_twist(src, base_log, length, tw_re, tw_im, out):
    """Gadget-decompose polys ``src`` (rows, N) and fold/twist into ``out`` (M, rows*length)."""
    rows, n = src.shape
    m = n // 2
    total = base_log * length
    shift = np.uint64(64 - total)
    one = np.uint64(1)
    bl = np.uint64(base_log)
    bmask = np.uint64((1 << base_log) - 1)
    half = 1 << (base_log - 1)
    base = 1 << base_log
    dlo = np.empty(length, dtype=np.int64)
    dhi = np.empty(length, dtype=np.int64)
    for j in range(m):
        c = tw_re[j]
        s = tw_im[j]
        for r in range(rows):
            for side in range(2):
                x = src[r, j] if side == 0 else src[r, j + m]
                if total < 64:
                    v = (x >> shift) + ((x >> (shift - one)) & one)
                else:
                    v = x
                for q in range(length - 1, -1, -1):
                    d = np.int64(v & bmask)
                    v = v >> bl
                    if d >= half:
                        d -= base
                        v = v + one
                    if side == 0:
                        dlo[q] = d
                    else:
                        dhi[q] = d
            for q in range(length):
                a = float(dlo[q])
                b = float(dhi[q])
                out[j, r * length + q] = complex(a * c - b * s, a * s + b * c)


# ---------------------------------------------------------------------------
# External product, CMux
# ---------------------------------------------------------------------------


class ExternalProductWorkspace:
    """Caller-owned scratch buffers for batched external products."""

    def __init__(self, batch: int, k: int, n: int, length: int):
        m = n // 2
        rows_in = batch * (k + 1) * length
        rows_out = batch * (k + 1)
        self.x = np.empty((m, rows_in), dtype=np.complex128)
        self.xs = np.empty_like(self.x)
        self.y = np.empty((m, rows_out), dtype=np.complex128)
        self.ys = np.empty_like(self.y)
        self.batch = batch

    def fits(self, batch: int, k: int, n: int, length: int) -> bool:
        return self.x.shape == (n // 2, batch * (k + 1) * length)


def external_product_add(
    glwe: np.ndarray,
    ggsw_fourier: np.ndarray,
    base_log: int,
    length: int,
    acc: np.ndarray,
    cfg: FftConfig = DEFAULT_FFT,
    ws: ExternalProductWorkspace | None = None,
) -> None:
    """acc += ggsw ⊡ glwe for a batch ``glwe`` (B, k+1, N) sharing one GGSW.

    ``ggsw_fourier`` has layout (M, (k+1)*length, k+1).  ``acc`` is
    (B, k+1, N) uint64, updated in place.
    """
    b, c, n = glwe.shape
    tab = twist_table(n)
    if ws is None or not ws.fits(b, c - 1, n, length):
        ws = ExternalProductWorkspace(b, c - 1, n, length)
    src = np.ascontiguousarray(glwe).reshape(b * c, n)
    _decompose_twist(src, base_log, length, tab.tw_re, tab.tw_im, ws.x)
    fft_inplace(ws.x, ws.xs, tab, cfg, -1)
    mac_fourier(ws.x, ggsw_fourier, ws.y, cfg.use_karatsuba)
    fft_inplace(ws.y, ws.ys, tab, cfg, +1)
    untwist_round_add(ws.y, tab.tw_re, tab.tw_im, acc.reshape(b * c, n))


def external_product(ggsw: GgswCiphertext, glwe: GlweCiphertext, cfg: FftConfig = DEFAULT_FFT) -> GlweCiphertext:
    """GGSW ⊡ GLWE; the result encrypts the product of the two plaintexts."""
    if ggsw.level != glwe.level or ggsw.data.shape[-1] != glwe.poly_degree:
        raise ValueError("GGSW and GLWE parameters do not match")
    data = np.ascontiguousarray(glwe.data)
    one = data.ndim == 2
    batch = data[None] if one else data.reshape(-1, *data.shape[-2:])
    acc = np.zeros_like(batch)
    external_product_add(batch, ggsw.fourier(cfg), ggsw.base_log, ggsw.length, acc, cfg)
    out = acc[0] if one else acc.reshape(data.shape)
    return GlweCiphertext(out, glwe.level)


def cmux(selector: GgswCiphertext, d0: GlweCiphertext, d1: GlweCiphertext, cfg: FftConfig = DEFAULT_FFT) -> GlweCiphertext:
    """d0 + selector ⊡ (d1 - d0)."""
    diff = external_product(selector, d1 - d0, cfg)
    return d0 + diff


# ---------------------------------------------------------------------------
# Blind rotation, sample extraction, PBS
# ---------------------------------------------------------------------------


def blind_rotate_raw(
    acc: np.ndarray,
    lwe0: np.ndarray,
    bsk: BootstrapKey,
    cfg: FftConfig = DEFAULT_FFT,
) -> np.ndarray:
    """Rotate accumulators ``acc`` (B, k+1, N) by minus the phases of ``lwe0`` (B, n0+1).

    The accumulator is first multiplied by X^{-b~}; each key bit then applies
    ``acc <- CMux(bsk_i, acc, X^{a~_i} acc)``.
    """
    b, c, n = acc.shape
    ms = modulus_switch(lwe0, n)  # (B, n0+1)
    acc = np.ascontiguousarray(acc)
    rotated = np.empty_like(acc)
    _rotate(acc, (2 * n - ms[:, -1]) % (2 * n), rotated)
    acc = rotated
    diff = np.empty_like(acc)
    ws = ExternalProductWorkspace(b, c - 1, n, bsk.gadget.length)
    for i in range(lwe0.shape[1] - 1):
        rots = np.ascontiguousarray(ms[:, i])
        if not rots.any():
            continue
        _rotate_sub(acc, rots, diff)
        external_product_add(diff, bsk.fourier[i], bsk.gadget.base_log, bsk.gadget.length, acc, cfg, ws)
    return acc


def blind_rotate(acc: GlweCiphertext, ct: LweCiphertext, bsk: BootstrapKey, cfg: FftConfig = DEFAULT_FFT) -> GlweCiphertext:
    if ct.level != 0:
        raise ValueError("blind rotation expects a level-0 ciphertext")
    data = np.atleast_2d(ct.data)
    a = np.broadcast_to(acc.data, (data.shape[0],) + acc.data.shape[-2:]).copy()
    out = blind_rotate_raw(a, data, bsk, cfg)
    if ct.data.ndim == 1:
        out = out[0]
    return GlweCiphertext(out, bsk.out_level)


def sample_extract_raw(glwe: np.ndarray, index: int = 0) -> np.ndarray:
    """(B, k+1, N) -> (B, k*N + 1) LWE of coefficient ``index`` under the flattened key."""
    b, c, n = glwe.shape
    k = c - 1
    if not 0 <= index < n:
        raise ValueError("sample index out of range")
    out = np.empty((b, k * n + 1), dtype=U64)
    j = np.arange(n)
    src = index - j
    neg = src < 0
    src = np.where(neg, src + n, src)
    for comp in range(k):
        vals = glwe[:, comp, src]
        vals = np.where(neg[None, :], U64(0) - vals, vals)
        out[:, comp * n:(comp + 1) * n] = vals
    out[:, -1] = glwe[:, k, index]
    return out


def sample_extract(glwe: GlweCiphertext, index: int = 0) -> LweCiphertext:
    data = glwe.data
    one = data.ndim == 2
    flat = data[None] if one else data.reshape(-1, *data.shape[-2:])
    out = sample_extract_raw(flat, index)
    if one:
        out = out[0]
    else:
        out = out.reshape(data.shape[:-2] + (out.shape[-1],))
    return LweCiphertext(out, glwe.level)


def pbs_raw(
    lwe0: np.ndarray,
    test_polys: np.ndarray,
    lut_index: np.ndarray,
    bsk: BootstrapKey,
    cfg: FftConfig = DEFAULT_FFT,
) -> np.ndarray:
    """Blind-rotate per-row test polynomials by level-0 ciphertexts and extract coefficient 0."""
    n = test_polys.shape[-1]
    k = bsk.ggsw.shape[-2] - 1
    b = lwe0.shape[0]
    acc = np.zeros((b, k + 1, n), dtype=U64)
    acc[:, k, :] = test_polys[lut_index]
    acc = blind_rotate_raw(acc, lwe0, bsk, cfg)
    return sample_extract_raw(acc, 0)


def programmable_bootstrap_raw(
    data: np.ndarray,
    test_polys: np.ndarray,
    lut_index: np.ndarray,
    keys: KeyBundle,
    level: int = 1,
    cfg: FftConfig = DEFAULT_FFT,
) -> np.ndarray:
    """Batched PBS of level-1 ciphertexts (level 1) or level-0 ciphertexts (level 2)."""
    if level == 1:
        small = keyswitch_raw(data, keys.ksk_gpbs)
        return pbs_raw(small, test_polys, lut_index, keys.bk_gpbs, cfg)
    if level == 2:
        return pbs_raw(data, test_polys, lut_index, keys.bk_l2, cfg)
    raise ValueError("PBS level must be 1 or 2")


def programmable_bootstrap(
    ct: LweCiphertext,
    table: np.ndarray,
    keys: KeyBundle,
    level: int = 1,
    cfg: FftConfig = DEFAULT_FFT,
) -> LweCiphertext:
    """Apply ``table`` (torus words, one per padded message) to ``ct``.

    Level 1: ``ct`` is a level-1 ciphertext, key-switched to level 0 then
    bootstrapped with the GPBS key.  Level 2: ``ct`` is already at level 0 and
    is bootstrapped to level 2.
    """
    expected = 1 if level == 1 else 0
    if ct.level != expected:
        raise ValueError(f"PBS to level {level} expects input level {expected}")
    n = keys.params.poly_degree(level)
    tp = test_polynomial(table, n)[None, :]
    data = np.atleast_2d(ct.data).reshape(-1, ct.data.shape[-1])
    out = programmable_bootstrap_raw(data, tp, np.zeros(data.shape[0], dtype=np.int64), keys, level, cfg)
    out = out.reshape(ct.data.shape[:-1] + (out.shape[-1],))
    return LweCiphertext(out, level)
