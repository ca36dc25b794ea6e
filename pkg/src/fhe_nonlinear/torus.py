"""Discretised torus arithmetic, ciphertext containers, keys and key generation.

Torus elements are ``uint64`` words read as reals in [0, 1) scaled by 2^64;
numpy's wrapping unsigned arithmetic supplies the reduction mod 2^64.

Ciphertexts are stored as plain arrays so that a single container can hold
one ciphertext or a whole batch:

* LWE: ``(..., n + 1)`` -- mask words followed by the body.
* GLWE: ``(..., k + 1, N)`` -- k mask polynomials followed by the body.
* GGSW: ``((k + 1) * length, k + 1, N)`` -- one GLWE row per (component, level),
  component-major.

The phase of an LWE ciphertext is ``b - <a, s>``; GLWE phases use the same
convention with negacyclic polynomial products.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .poly_fft import DEFAULT_FFT, FftConfig, negacyclic_mul_u64, to_fourier

U64 = np.uint64
MASK32 = U64(0xFFFFFFFF)


class ConfigurationError(ValueError):
    """Raised for inconsistent parameters or unsupported requests."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GadgetParams:
    """Gadget decomposition settings and encryption noise for one key."""

    base_log: int
    length: int
    sigma: float

    def validate(self, name: str) -> None:
        if self.base_log < 1 or self.length < 1 or self.base_log * self.length > 64:
            raise ConfigurationError(f"{name}: base_log*length must lie in [1, 64]")
        if not 0.0 < self.sigma < 1.0:
            raise ConfigurationError(f"{name}: sigma must lie in (0, 1)")


KEY_NAMES = ("bk_cmux", "bk_gpbs", "bk_l2", "ksk_cmux", "ksk_gpbs", "ksk_fbt", "ksk_l2_l1", "pfks")


@dataclass(frozen=True)
class ParameterSet:
    """Dimensions, per-level fresh-encryption noise and per-key gadget parameters.

    Key roles:

    * ``bk_gpbs``: level-0 -> level-1 blind rotation for radix-block PBS.
    * ``bk_l2``: level-0 -> level-2 blind rotation used by circuit bootstrapping.
    * ``bk_cmux``: gadget of the GGSW ciphertexts produced by circuit
      bootstrapping; these drive the vertical-packing CMuxes.
    * ``ksk_gpbs`` / ``ksk_cmux``: level-1 -> level-0 key switches before a
      block PBS and inside bit extraction respectively.
    * ``ksk_l2_l1``: level-2 -> level-1 key switch.
    * ``pfks``: private functional key switch, level-2 LWE -> level-1 GLWE.
    * ``ksk_fbt``: listed for completeness, never generated.
    """

    name: str
    n0: int
    n1_poly: int
    n2_poly: int
    k: int
    sigma_l0: float
    sigma_l1: float
    sigma_l2: float
    bk_cmux: GadgetParams
    bk_gpbs: GadgetParams
    bk_l2: GadgetParams
    ksk_cmux: GadgetParams
    ksk_gpbs: GadgetParams
    ksk_fbt: GadgetParams
    ksk_l2_l1: GadgetParams
    pfks: GadgetParams

    @property
    def n1(self) -> int:
        return self.k * self.n1_poly

    @property
    def n2(self) -> int:
        return self.k * self.n2_poly

    def lwe_dim(self, level: int) -> int:
        return {0: self.n0, 1: self.n1, 2: self.n2}[level]

    def poly_degree(self, level: int) -> int:
        return {1: self.n1_poly, 2: self.n2_poly}[level]

    def sigma(self, level: int) -> float:
        return {0: self.sigma_l0, 1: self.sigma_l1, 2: self.sigma_l2}[level]

    def validate(self) -> "ParameterSet":
        for n in (self.n1_poly, self.n2_poly):
            if n < 4 or n & (n - 1):
                raise ConfigurationError(f"polynomial degree {n} is not a power of two")
        if self.k != 1:
            raise ConfigurationError("only GLWE dimension k = 1 is supported")
        if self.n0 < 1:
            raise ConfigurationError("level-0 dimension must be positive")
        for lv in (0, 1, 2):
            if not 0.0 < self.sigma(lv) < 1.0:
                raise ConfigurationError(f"level {lv} sigma must lie in (0, 1)")
        for name in KEY_NAMES:
            getattr(self, name).validate(name)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        d = dict(d)
        for name in KEY_NAMES:
            d[name] = GadgetParams(**d[name])
        return cls(**d).validate()

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "ParameterSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def paper_params() -> ParameterSet:
    """Production dimensions and key rows (L0 500, L1 1024, L2 2048)."""
    return ParameterSet(
        name="paper",
        n0=500,
        n1_poly=1024,
        n2_poly=2048,
        k=1,
        sigma_l0=2.0**-15,
        sigma_l1=7.18e-9,
        sigma_l2=2.0**-45,
        bk_cmux=GadgetParams(6, 3, 2.0**-15),
        bk_gpbs=GadgetParams(4, 6, 7.18e-9),
        bk_l2=GadgetParams(9, 6, 2.0**-45),
        ksk_cmux=GadgetParams(2, 7, 2.0**-15),
        ksk_gpbs=GadgetParams(1, 14, 1e-5),
        ksk_fbt=GadgetParams(6, 3, 2.0**-25),
        ksk_l2_l1=GadgetParams(2, 16, 2.0**-31),
        pfks=GadgetParams(2, 16, 2.0**-31),
    ).validate()


def toy_params() -> ParameterSet:
    """Insecure small preset for fast exhaustive tests.

    The level-0 dimension is 32: with N1 = 256 a dimension of 64 leaves the
    modulus-switching noise at about 4.9 standard deviations from the
    decision boundary, which fails roughly once per million PBS.
    """
    tiny = 2.0**-40
    return ParameterSet(
        name="toy",
        n0=32,
        n1_poly=256,
        n2_poly=512,
        k=1,
        sigma_l0=2.0**-30,
        sigma_l1=2.0**-40,
        sigma_l2=2.0**-50,
        bk_cmux=GadgetParams(6, 3, tiny),
        bk_gpbs=GadgetParams(10, 2, tiny),
        bk_l2=GadgetParams(16, 3, 2.0**-50),
        ksk_cmux=GadgetParams(4, 5, tiny),
        ksk_gpbs=GadgetParams(4, 5, tiny),
        ksk_fbt=GadgetParams(6, 3, tiny),
        ksk_l2_l1=GadgetParams(4, 8, tiny),
        pfks=GadgetParams(4, 8, tiny),
    ).validate()


PRESETS = {"paper": paper_params, "toy": toy_params}


def load_preset(name_or_path: str) -> ParameterSet:
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]()
    return ParameterSet.from_json(name_or_path)


# ---------------------------------------------------------------------------
# Torus encoding helpers
# ---------------------------------------------------------------------------


def encode(message, plaintext_bits: int) -> np.ndarray:
    """Place integer messages in the top ``plaintext_bits`` of a torus word."""
    m = np.asarray(message).astype(np.int64).view(U64)
    return m << U64(64 - plaintext_bits)


def decode(phase, plaintext_bits: int) -> np.ndarray:
    """round(phase * 2^bits / 2^64) mod 2^bits."""
    p = np.asarray(phase, dtype=U64)
    shift = U64(64 - plaintext_bits)
    rounded = (p >> shift) + ((p >> (shift - U64(1))) & U64(1))
    return (rounded & U64((1 << plaintext_bits) - 1)).astype(np.int64)


def torus_to_signed_float(x) -> np.ndarray:
    """Interpret torus words as reals in [-1/2, 1/2)."""
    return np.asarray(x, dtype=U64).view(np.int64) / 2.0**64


def sample_noise(rng: np.random.Generator, sigma: float, shape) -> np.ndarray:
    """Rounded continuous Gaussian with standard deviation ``sigma`` of the torus."""
    e = np.rint(rng.normal(0.0, sigma * 2.0**64, size=shape))
    return e.astype(np.int64).view(U64)


def uniform_torus(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2**64, size=shape, dtype=U64, endpoint=False)


# ---------------------------------------------------------------------------
# Gadget decomposition
# ---------------------------------------------------------------------------


def gadget_round(values, base_log: int, length: int) -> np.ndarray:
    """Round words to the top ``base_log*length`` bits (round half up), as an integer."""
    x = np.asarray(values, dtype=U64)
    total = base_log * length
    shift = 64 - total
    if shift == 0:
        return x.copy()
    v = (x >> U64(shift)) + ((x >> U64(shift - 1)) & U64(1))
    return v & U64((1 << total) - 1) if total < 64 else v


def gadget_decompose(values, base_log: int, length: int) -> np.ndarray:
    """Signed digits ``d_j`` in [-B/2, B/2) with sum_j d_j 2^(64-(j+1)base_log) ~= value.

    Digit ``j = 0`` is the most significant.  Output shape ``values.shape +
    (length,)``, dtype int64.  The reconstruction error is at most
    ``2^(63 - base_log*length)`` in magnitude (strictly smaller except when the
    discarded low bits are exactly one half).
    """
    if base_log * length > 64:
        raise ConfigurationError("base_log*length exceeds 64")
    v = gadget_round(values, base_log, length)
    base = U64(1 << base_log)
    half = 1 << (base_log - 1)
    mask = base - U64(1)
    out = np.empty(v.shape + (length,), dtype=np.int64)
    for j in range(length - 1, -1, -1):
        d = (v & mask).astype(np.int64)
        v = v >> U64(base_log)
        carry = d >= half
        d = d - (carry.astype(np.int64) << base_log)
        v = v + carry.astype(U64)
        out[..., j] = d
    return out


def gadget_recompose(digits, base_log: int) -> np.ndarray:
    """Inverse of :func:`gadget_decompose` (wrapping sum)."""
    d = np.asarray(digits, dtype=np.int64)
    length = d.shape[-1]
    acc = np.zeros(d.shape[:-1], dtype=U64)
    for j in range(length):
        acc += d[..., j].view(U64) << U64(64 - (j + 1) * base_log)
    return acc


def gadget_scales(base_log: int, length: int) -> np.ndarray:
    return np.array([1 << (64 - (j + 1) * base_log) for j in range(length)], dtype=U64)


# ---------------------------------------------------------------------------
# Exact integer dot products with 64-bit keys
# ---------------------------------------------------------------------------


class LimbMatrix:
    """A uint64 matrix multiplied exactly (mod 2^64) by small signed integer rows.

    The matrix is split into two 32-bit limbs evaluated with float64 BLAS;
    every partial sum is an integer below 2^53, so the result is exact.
    Small matrices keep their float limbs cached, large ones convert row
    chunks on the fly.
    """

    CACHE_LIMIT_BYTES = 256 * 2**20

    def __init__(self, words: np.ndarray):
        self.words = np.ascontiguousarray(words, dtype=U64)
        self.words.setflags(write=False)
        self._limbs = None
        if 2 * self.words.nbytes <= self.CACHE_LIMIT_BYTES:
            self._limbs = self._split(self.words)

    @staticmethod
    def _split(w):
        return (w & MASK32).astype(np.float64), (w >> U64(32)).astype(np.float64)

    @property
    def shape(self):
        return self.words.shape

    def dot(self, digits: np.ndarray, max_digit: int) -> np.ndarray:
        """``digits`` (B, R) int -> (B, W) uint64 = digits @ words mod 2^64."""
        rows = self.words.shape[0]
        if digits.shape[-1] != rows:
            raise ValueError("digit row count does not match key")
        chunk = max(1, min(rows, (1 << 20) // max(1, max_digit)))
        if self._limbs is None:
            chunk = min(chunk, max(1, (64 * 2**20) // (8 * self.words.shape[1])))
        d = digits.astype(np.float64)
        out = np.zeros((digits.shape[0], self.words.shape[1]), dtype=U64)
        for start in range(0, rows, chunk):
            stop = min(rows, start + chunk)
            if self._limbs is not None:
                lo = self._limbs[0][start:stop]
                hi = self._limbs[1][start:stop]
            else:
                lo, hi = self._split(self.words[start:stop])
            dc = d[:, start:stop]
            plo = (dc @ lo).astype(np.int64).view(U64)
            phi = (dc @ hi).astype(np.int64).view(U64)
            out += plo + (phi << U64(32))
        return out


# ---------------------------------------------------------------------------
# Ciphertext containers
# ---------------------------------------------------------------------------


@dataclass
class LweCiphertext:
    """One LWE ciphertext or a batch; ``data[..., :-1]`` is the mask, ``data[..., -1]`` the body."""

    data: np.ndarray
    level: int

    @property
    def mask(self) -> np.ndarray:
        return self.data[..., :-1]

    @property
    def body(self) -> np.ndarray:
        return self.data[..., -1]

    @property
    def dim(self) -> int:
        return self.data.shape[-1] - 1

    def __add__(self, other: "LweCiphertext") -> "LweCiphertext":
        _same_level(self, other)
        return LweCiphertext(self.data + other.data, self.level)

    def __sub__(self, other: "LweCiphertext") -> "LweCiphertext":
        _same_level(self, other)
        return LweCiphertext(self.data - other.data, self.level)


@dataclass
class GlweCiphertext:
    """GLWE ciphertext(s): ``data[..., :k, :]`` masks, ``data[..., k, :]`` body."""

    data: np.ndarray
    level: int

    @property
    def poly_degree(self) -> int:
        return self.data.shape[-1]

    def __add__(self, other: "GlweCiphertext") -> "GlweCiphertext":
        _same_level(self, other)
        return GlweCiphertext(self.data + other.data, self.level)

    def __sub__(self, other: "GlweCiphertext") -> "GlweCiphertext":
        _same_level(self, other)
        return GlweCiphertext(self.data - other.data, self.level)


@dataclass
class GgswCiphertext:
    """GGSW ciphertext(s) with rows ``(component, level)``; Fourier form cached on demand.

    ``data`` has shape ``(..., (k+1)*length, k+1, N)``.
    """

    data: np.ndarray
    level: int
    base_log: int
    length: int
    _fourier: np.ndarray | None = field(default=None, repr=False, compare=False)

    def fourier(self, cfg: FftConfig = DEFAULT_FFT) -> np.ndarray:
        """Fourier form with layout ``(..., M, rows, k+1)``."""
        if self._fourier is None:
            self._fourier = ggsw_to_fourier(self.data, cfg)
        return self._fourier


def _same_level(a, b):
    if a.level != b.level:
        raise ValueError(f"level mismatch: {a.level} vs {b.level}")


def ggsw_to_fourier(data: np.ndarray, cfg: FftConfig = DEFAULT_FFT) -> np.ndarray:
    """(..., R, C, N) uint64 -> (..., M, R, C) complex, keys read as signed int64."""
    lead = data.shape[:-3]
    r, c, n = data.shape[-3:]
    flat = data.reshape(-1, n).view(np.int64).astype(np.float64)
    spec = to_fourier(flat, cfg)  # (M, batch*R*C)
    spec = spec.reshape(n // 2, -1, r, c)
    spec = np.moveaxis(spec, 0, 1)
    return np.ascontiguousarray(spec.reshape(lead + (n // 2, r, c)))


# ---------------------------------------------------------------------------
# Secret keys, encryption, decryption
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LweSecretKey:
    bits: np.ndarray  # (n,) int64 in {0,1}
    level: int


@dataclass(frozen=True)
class GlweSecretKey:
    polys: np.ndarray  # (k, N) int64 in {0,1}
    level: int

    def flatten(self) -> LweSecretKey:
        return LweSecretKey(self.polys.reshape(-1).copy(), self.level)


def lwe_phase(ct: LweCiphertext, key: LweSecretKey) -> np.ndarray:
    if ct.level != key.level or ct.dim != key.bits.shape[0]:
        raise ValueError("key does not match ciphertext level")
    s = key.bits.astype(U64)
    dot = (ct.mask * s).sum(axis=-1, dtype=U64)
    return ct.body - dot


def encrypt_lwe(message, key: LweSecretKey, sigma: float, rng: np.random.Generator) -> LweCiphertext:
    """Encrypt torus word(s) ``message`` (any shape) under ``key``."""
    msg = np.asarray(message, dtype=U64)
    n = key.bits.shape[0]
    mask = uniform_torus(rng, msg.shape + (n,))
    s = key.bits.astype(U64)
    body = (mask * s).sum(axis=-1, dtype=U64) + msg + sample_noise(rng, sigma, msg.shape)
    data = np.concatenate([mask, body[..., None]], axis=-1)
    return LweCiphertext(data, key.level)


def decrypt_lwe(ct: LweCiphertext, key: LweSecretKey, plaintext_bits: int) -> np.ndarray:
    """round(phase * 2^bits / 2^64) mod 2^bits."""
    return decode(lwe_phase(ct, key), plaintext_bits)


def trivial_lwe(message, dim: int, level: int) -> LweCiphertext:
    msg = np.asarray(message, dtype=U64)
    data = np.zeros(msg.shape + (dim + 1,), dtype=U64)
    data[..., -1] = msg
    return LweCiphertext(data, level)


def glwe_phase(ct: GlweCiphertext, key: GlweSecretKey) -> np.ndarray:
    k = key.polys.shape[0]
    masks = ct.data[..., :k, :]
    prod = negacyclic_mul_u64(masks, key.polys)
    return ct.data[..., k, :] - prod.sum(axis=-2, dtype=U64)


def encrypt_glwe(message_poly, key: GlweSecretKey, sigma: float, rng: np.random.Generator) -> GlweCiphertext:
    """Encrypt polynomial(s) of torus words, shape ``(..., N)``."""
    msg = np.asarray(message_poly, dtype=U64)
    k, n = key.polys.shape
    masks = uniform_torus(rng, msg.shape[:-1] + (k, n))
    prod = negacyclic_mul_u64(masks, key.polys).sum(axis=-2, dtype=U64)
    body = prod + msg + sample_noise(rng, sigma, msg.shape)
    data = np.concatenate([masks, body[..., None, :]], axis=-2)
    return GlweCiphertext(data, key.level)


def decrypt_glwe(ct: GlweCiphertext, key: GlweSecretKey, plaintext_bits: int) -> np.ndarray:
    return decode(glwe_phase(ct, key), plaintext_bits)


def trivial_glwe(message_poly, k: int, level: int) -> GlweCiphertext:
    msg = np.asarray(message_poly, dtype=U64)
    data = np.zeros(msg.shape[:-1] + (k + 1, msg.shape[-1]), dtype=U64)
    data[..., k, :] = msg
    return GlweCiphertext(data, level)


def encrypt_ggsw(message, key: GlweSecretKey, gadget: GadgetParams, rng: np.random.Generator) -> GgswCiphertext:
    """GGSW encryption of small integer constant(s) ``message`` (any shape)."""
    msg = np.asarray(message, dtype=np.int64)
    k, n = key.polys.shape
    rows = (k + 1) * gadget.length
    zeros = np.zeros(msg.shape + (rows, n), dtype=U64)
    ct = encrypt_glwe(zeros, key, gadget.sigma, rng).data  # (..., rows, k+1, N)
    scales = gadget_scales(gadget.base_log, gadget.length)
    mv = msg.view(U64)
    for c in range(k + 1):
        for j in range(gadget.length):
            ct[..., c * gadget.length + j, c, 0] += np.asarray(mv, dtype=U64) * scales[j]
    return GgswCiphertext(ct, key.level, gadget.base_log, gadget.length)


def decrypt_ggsw_bit(ct: GgswCiphertext, key: GlweSecretKey) -> np.ndarray:
    """Recover the constant message of a GGSW from its body rows at the first level."""
    k = key.polys.shape[0]
    row = GlweCiphertext(ct.data[..., k * ct.length, :, :], ct.level)
    return decode(glwe_phase(row, key)[..., 0], ct.base_log)


# ---------------------------------------------------------------------------
# Key bundle and key generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapKey:
    """GGSW encryptions of the level-0 key bits under a GLWE key."""

    ggsw: np.ndarray  # (n0, (k+1)*l, k+1, N) uint64
    fourier: np.ndarray  # (n0, M, (k+1)*l, k+1) complex
    gadget: GadgetParams
    out_level: int


@dataclass(frozen=True)
class KeySwitchKey:
    """Rows ``LWE_out(s_in[i] * g_j)`` stacked as a (n_in*l, n_out+1) matrix."""

    matrix: LimbMatrix
    gadget: GadgetParams
    in_level: int
    out_level: int


@dataclass(frozen=True)
class PrivateKeySwitchKey:
    """Private functional key switch from level-2 LWE to level-1 GLWE.

    Rows ``GLWE_S1(f_c(s2[i]) * g_j)`` for the k+1 functions
    ``f_c(x) = -S1_c * x`` (c < k) and ``f_k(x) = x``; the matrix has shape
    ``(n2*l, (k+1)*(k+1)*N1)``.
    """

    matrix: LimbMatrix
    gadget: GadgetParams


@dataclass(frozen=True)
class KeyBundle:
    params: ParameterSet
    lwe0: LweSecretKey
    glwe1: GlweSecretKey
    glwe2: GlweSecretKey
    bk_gpbs: BootstrapKey
    bk_l2: BootstrapKey
    ksk_gpbs: KeySwitchKey
    ksk_cmux: KeySwitchKey
    ksk_l2_l1: KeySwitchKey
    pfks: PrivateKeySwitchKey
    seed: int | None = None

    @property
    def lwe1(self) -> LweSecretKey:
        return self.glwe1.flatten()

    @property
    def lwe2(self) -> LweSecretKey:
        return self.glwe2.flatten()

    def lwe_key(self, level: int) -> LweSecretKey:
        return {0: self.lwe0, 1: self.lwe1, 2: self.lwe2}[level]

    def server_keys(self) -> dict:
        return {
            "bk_gpbs": self.bk_gpbs,
            "bk_l2": self.bk_l2,
            "ksk_gpbs": self.ksk_gpbs,
            "ksk_cmux": self.ksk_cmux,
            "ksk_l2_l1": self.ksk_l2_l1,
            "pfks": self.pfks,
        }


def _gen_bootstrap_key(rng, lwe0: LweSecretKey, glwe: GlweSecretKey, gadget: GadgetParams, cfg) -> BootstrapKey:
    ggsw = encrypt_ggsw(lwe0.bits, glwe, gadget, rng)
    ggsw.data.setflags(write=False)
    fourier = ggsw_to_fourier(ggsw.data, cfg)
    fourier.setflags(write=False)
    return BootstrapKey(ggsw.data, fourier, gadget, glwe.level)


def _gen_ksk(rng, key_in: LweSecretKey, key_out: LweSecretKey, gadget: GadgetParams, sigma_out_level) -> KeySwitchKey:
    scales = gadget_scales(gadget.base_log, gadget.length)
    msgs = key_in.bits.astype(U64)[:, None] * scales[None, :]  # (n_in, l)
    n_out = key_out.bits.shape[0]
    rows = msgs.size
    mat = np.empty((rows, n_out + 1), dtype=U64)
    flat = msgs.reshape(-1)
    chunk = 4096
    s = key_out.bits.astype(np.float64)
    for start in range(0, rows, chunk):
        stop = min(rows, start + chunk)
        mask = uniform_torus(rng, (stop - start, n_out))
        # exact <mask, s> via the limb product with s as the small operand
        lo = (mask & MASK32).astype(np.float64) @ s
        hi = (mask >> U64(32)).astype(np.float64) @ s
        dot = lo.astype(np.int64).view(U64) + (hi.astype(np.int64).view(U64) << U64(32))
        body = dot + flat[start:stop] + sample_noise(rng, gadget.sigma, (stop - start,))
        mat[start:stop, :-1] = mask
        mat[start:stop, -1] = body
    return KeySwitchKey(LimbMatrix(mat), gadget, key_in.level, key_out.level)


def _gen_pfks(rng, glwe2: GlweSecretKey, glwe1: GlweSecretKey, gadget: GadgetParams) -> PrivateKeySwitchKey:
    k, n1 = glwe1.polys.shape
    s2 = glwe2.polys.reshape(-1).astype(np.int64)
    scales = gadget_scales(gadget.base_log, gadget.length)
    n2 = s2.shape[0]
    rows = n2 * gadget.length
    funcs = k + 1
    mat = np.empty((rows, funcs, k + 1, n1), dtype=U64)
    neg_keys = (-glwe1.polys).astype(np.int64).view(U64)  # -S1_c as torus polys
    chunk = 1024
    row_bits = np.repeat(s2, gadget.length).astype(U64)
    row_scale = np.tile(scales, n2)
    for start in range(0, rows, chunk):
        stop = min(rows, start + chunk)
        val = row_bits[start:stop] * row_scale[start:stop]  # s2[i]*g_j, (B,)
        msg = np.zeros((stop - start, funcs, n1), dtype=U64)
        for c in range(k):
            msg[:, c, :] = val[:, None] * neg_keys[c][None, :]
        msg[:, k, 0] = val
        mat[start:stop] = encrypt_glwe(msg, glwe1, gadget.sigma, rng).data
    return PrivateKeySwitchKey(LimbMatrix(mat.reshape(rows, -1)), gadget)


def keygen(params: ParameterSet, seed: int | None = 0, cfg: FftConfig = DEFAULT_FFT) -> KeyBundle:
    """Generate the full key hierarchy; deterministic for a fixed ``seed``.

    ``seed=None`` draws from system entropy.  Each key uses its own child
    stream, so keys do not depend on generation order.
    """
    params.validate()
    ss = np.random.SeedSequence(seed)
    streams = dict(zip(
        ["lwe0", "glwe1", "glwe2", "bk_gpbs", "bk_l2", "ksk_gpbs", "ksk_cmux", "ksk_l2_l1", "pfks"],
        [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(9)],
    ))
    lwe0 = LweSecretKey(streams["lwe0"].integers(0, 2, params.n0).astype(np.int64), 0)
    glwe1 = GlweSecretKey(streams["glwe1"].integers(0, 2, (params.k, params.n1_poly)).astype(np.int64), 1)
    glwe2 = GlweSecretKey(streams["glwe2"].integers(0, 2, (params.k, params.n2_poly)).astype(np.int64), 2)
    for arr in (lwe0.bits, glwe1.polys, glwe2.polys):
        arr.setflags(write=False)
    lwe1 = glwe1.flatten()
    lwe2 = glwe2.flatten()
    return KeyBundle(
        params=params,
        lwe0=lwe0,
        glwe1=glwe1,
        glwe2=glwe2,
        bk_gpbs=_gen_bootstrap_key(streams["bk_gpbs"], lwe0, glwe1, params.bk_gpbs, cfg),
        bk_l2=_gen_bootstrap_key(streams["bk_l2"], lwe0, glwe2, params.bk_l2, cfg),
        ksk_gpbs=_gen_ksk(streams["ksk_gpbs"], lwe1, lwe0, params.ksk_gpbs, 0),
        ksk_cmux=_gen_ksk(streams["ksk_cmux"], lwe1, lwe0, params.ksk_cmux, 0),
        ksk_l2_l1=_gen_ksk(streams["ksk_l2_l1"], lwe2, lwe1, params.ksk_l2_l1, 1),
        pfks=_gen_pfks(streams["pfks"], glwe2, glwe1, params.pfks),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# TGR1 binary format
# ---------------------------------------------------------------------------

MAGIC = b"TGR1"
FORMAT_VERSION = 1
KIND_CODES = {
    "lwe": 1,
    "glwe": 2,
    "ggsw": 3,
    "lwe_key": 4,
    "glwe_key": 5,
    "bootstrap_key": 6,
    "keyswitch_key": 7,
    "pfks_key": 8,
    "fixed_point": 9,
    "lookup_table": 10,
}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


def write_record(f, kind: str, level: int, words: np.ndarray, extra: tuple[int, ...] = ()) -> None:
    """Write one record: magic, version, kind, level, extra header ints, dims, LE u64 words."""
    arr = np.ascontiguousarray(words).astype("<u8", copy=False)
    f.write(MAGIC)
    f.write(struct.pack("<IIII", FORMAT_VERSION, KIND_CODES[kind], level, len(extra)))
    for e in extra:
        f.write(struct.pack("<q", int(e)))
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes())


def read_record(f) -> tuple[str, int, tuple[int, ...], np.ndarray]:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    version, kind, level, n_extra = struct.unpack("<IIII", f.read(16))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    extra = tuple(struct.unpack("<q", f.read(8))[0] for _ in range(n_extra))
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    buf = f.read(8 * count)
    if len(buf) != 8 * count:
        raise ValueError("truncated record")
    arr = np.frombuffer(buf, dtype="<u8").astype(U64).reshape(shape)
    return KIND_NAMES[kind], level, extra, arr


def save_lwe(path, ct: LweCiphertext) -> None:
    with open(path, "wb") as f:
        write_record(f, "lwe", ct.level, ct.data)


def load_lwe(path) -> LweCiphertext:
    with open(path, "rb") as f:
        kind, level, _, arr = read_record(f)
    if kind != "lwe":
        raise ValueError(f"expected lwe record, found {kind}")
    return LweCiphertext(arr, level)


def lwe_to_bytes(ct: LweCiphertext) -> bytes:
    buf = io.BytesIO()
    write_record(buf, "lwe", ct.level, ct.data)
    return buf.getvalue()


def lwe_from_bytes(b: bytes) -> LweCiphertext:
    kind, level, _, arr = read_record(io.BytesIO(b))
    return LweCiphertext(arr, level)


def save_keys(bundle: KeyBundle, directory: str | Path) -> dict[str, int]:
    """Write every key as its own TGR1 file plus ``params.json``; returns byte sizes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    bundle.params.to_json(d / "params.json")
    sizes = {}
    items = [
        ("lwe0.tgr", "lwe_key", 0, bundle.lwe0.bits.astype(U64), ()),
        ("glwe1.tgr", "glwe_key", 1, bundle.glwe1.polys.astype(U64), ()),
        ("glwe2.tgr", "glwe_key", 2, bundle.glwe2.polys.astype(U64), ()),
        ("bk_gpbs.tgr", "bootstrap_key", 1, bundle.bk_gpbs.ggsw, ()),
        ("bk_l2.tgr", "bootstrap_key", 2, bundle.bk_l2.ggsw, ()),
        ("ksk_gpbs.tgr", "keyswitch_key", 0, bundle.ksk_gpbs.matrix.words, (1,)),
        ("ksk_cmux.tgr", "keyswitch_key", 0, bundle.ksk_cmux.matrix.words, (1,)),
        ("ksk_l2_l1.tgr", "keyswitch_key", 1, bundle.ksk_l2_l1.matrix.words, (2,)),
        ("pfks.tgr", "pfks_key", 1, bundle.pfks.matrix.words, (2,)),
    ]
    for name, kind, level, words, extra in items:
        with open(d / name, "wb") as f:
            write_record(f, kind, level, words, extra)
        sizes[name] = (d / name).stat().st_size
    (d / "seed.json").write_text(json.dumps({"seed": bundle.seed}))
    return sizes


def load_keys(directory: str | Path, cfg: FftConfig = DEFAULT_FFT) -> KeyBundle:
    d = Path(directory)
    params = ParameterSet.from_json(d / "params.json")

    def rd(name):
        with open(d / name, "rb") as f:
            return read_record(f)[3]

    lwe0 = LweSecretKey(rd("lwe0.tgr").view(np.int64), 0)
    glwe1 = GlweSecretKey(rd("glwe1.tgr").view(np.int64), 1)
    glwe2 = GlweSecretKey(rd("glwe2.tgr").view(np.int64), 2)

    def bk(name, gadget, level):
        g = rd(name)
        g.setflags(write=False)
        f = ggsw_to_fourier(g, cfg)
        f.setflags(write=False)
        return BootstrapKey(g, f, gadget, level)

    seed = json.loads((d / "seed.json").read_text())["seed"] if (d / "seed.json").exists() else None
    return KeyBundle(
        params=params,
        lwe0=lwe0,
        glwe1=glwe1,
        glwe2=glwe2,
        bk_gpbs=bk("bk_gpbs.tgr", params.bk_gpbs, 1),
        bk_l2=bk("bk_l2.tgr", params.bk_l2, 2),
        ksk_gpbs=KeySwitchKey(LimbMatrix(rd("ksk_gpbs.tgr")), params.ksk_gpbs, 1, 0),
        ksk_cmux=KeySwitchKey(LimbMatrix(rd("ksk_cmux.tgr")), params.ksk_cmux, 1, 0),
        ksk_l2_l1=KeySwitchKey(LimbMatrix(rd("ksk_l2_l1.tgr")), params.ksk_l2_l1, 2, 1),
        pfks=PrivateKeySwitchKey(LimbMatrix(rd("pfks.tgr")), params.pfks),
        seed=seed,
    )


def with_fft(bundle: KeyBundle, cfg: FftConfig) -> KeyBundle:
    """Same keys with Fourier forms recomputed for another FFT variant."""
    def re(bk: BootstrapKey) -> BootstrapKey:
        f = ggsw_to_fourier(bk.ggsw, cfg)
        f.setflags(write=False)
        return BootstrapKey(bk.ggsw, f, bk.gadget, bk.out_level)

    return replace(bundle, bk_gpbs=re(bundle.bk_gpbs), bk_l2=re(bundle.bk_l2))
