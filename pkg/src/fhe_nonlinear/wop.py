"""High-precision table lookups: bit extraction, circuit bootstrapping, vertical packing.

A lookup takes radix blocks at level 1 (each block a small integer scaled by
``2^BLOCK_DELTA_LOG``), splits every block into encrypted bits at level 0,
turns each bit into a GGSW ciphertext and then selects the table entry with
a CMux tree over table polynomials followed by one blind rotation.  Each
output is returned as a level-1 block ciphertext.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass

import numpy as np

from .batch import Scheduler
from .boot import ExternalProductWorkspace, _rotate_sub, external_product_add, keyswitch_raw, sample_extract_raw
from .torus import (
    U64,
    ConfigurationError,
    GgswCiphertext,
    KeyBundle,
    LweCiphertext,
    gadget_decompose,
    ggsw_to_fourier,
    read_record,
    write_record,
)

BLOCK_DELTA_LOG = 59  # blocks carry 4 message bits below one padding bit
BLOCK_BITS = 2
MAX_INPUT_BITS = 24


# ---------------------------------------------------------------------------
# Lookup tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LookupTable:
    """Plaintext table with one or more outputs per input index.

    ``values[e, i]`` is output ``e`` at index ``i``, an integer below
    ``2^output_bits[e]``.  For evaluation every output is split into 2-bit
    radix blocks, each one produced by its own vertical-packing pass.
    """

    input_bits: int
    output_bits: tuple[int, ...]
    values: np.ndarray  # (entries, 2^input_bits) uint64

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=U64)
        if vals.ndim == 1:
            vals = vals[None, :]
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "output_bits", tuple(int(b) for b in self.output_bits))
        if self.input_bits < 1:
            raise ConfigurationError("a table needs at least one input bit")
        if vals.shape != (len(self.output_bits), 1 << self.input_bits):
            raise ConfigurationError("table shape does not match input_bits and entry count")
        for e, bits in enumerate(self.output_bits):
            if not 1 <= bits <= 64:
                raise ConfigurationError("output_bits must lie in [1, 64]")
            if bits < 64 and int(vals[e].max(initial=0)) >> bits:
                raise ConfigurationError(f"entry {e} has values wider than {bits} bits")

    @classmethod
    def from_function(cls, input_bits: int, output_bits, fn) -> "LookupTable":
        """Tabulate ``fn(indices) -> value array or tuple of arrays``."""
        idx = np.arange(1 << input_bits, dtype=np.int64)
        out = fn(idx)
        if not isinstance(out, tuple):
            out = (out,)
        bits = (output_bits,) if isinstance(output_bits, int) else tuple(output_bits)
        return cls(input_bits, bits, np.stack([np.asarray(o).astype(np.int64).view(U64) for o in out]))

    @property
    def entry_count(self) -> int:
        return len(self.output_bits)

    def blocks_per_entry(self) -> list[int]:
        return [math.ceil(b / BLOCK_BITS) for b in self.output_bits]

    @property
    def block_count(self) -> int:
        return sum(self.blocks_per_entry())

    def block_digits(self, block: int) -> np.ndarray:
        """Digit table (2^input_bits,) of output block ``block`` (entries in order, LSB block first)."""
        for e, nb in enumerate(self.blocks_per_entry()):
            if block < nb:
                return ((self.values[e] >> U64(BLOCK_BITS * block)) & U64(3)).astype(np.uint8)
            block -= nb
        raise IndexError("block index out of range")

    def lookup(self, index) -> np.ndarray:
        """Plaintext lookup: (entries, ...) values at integer ``index``."""
        return self.values[:, np.asarray(index, dtype=np.int64)]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_record(buf, "lookup_table", 0, self.values,
                     extra=(self.input_bits, self.entry_count, *self.output_bits))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LookupTable":
        kind, _, extra, words = read_record(io.BytesIO(data))
        if kind != "lookup_table":
            raise ValueError(f"expected a lookup table record, got {kind}")
        input_bits, entries = extra[0], extra[1]
        bits = tuple(extra[2:2 + entries])
        return cls(input_bits, bits, words.reshape(entries, 1 << input_bits))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "LookupTable":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


# ---------------------------------------------------------------------------
# Bit extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExtractedBits:
    """Level-0 encryptions of single bits at scale 2^63, most significant bit first.

    ``bits.data`` has shape ``(width, ..., n0 + 1)``.
    """

    bits: LweCiphertext

    @property
    def width(self) -> int:
        return self.bits.data.shape[0]


def _to_level0(data: np.ndarray, level: int, keys: KeyBundle) -> np.ndarray:
    if level == 2:
        data = keyswitch_raw(data, keys.ksk_l2_l1)
    return keyswitch_raw(data, keys.ksk_cmux)


def extract_bits_raw(data: np.ndarray, width: int, level: int, keys: KeyBundle, sched: Scheduler,
                     delta_log: int = BLOCK_DELTA_LOG) -> np.ndarray:
    """Bits of messages ``m * 2^delta_log`` in rows ``data`` (B, n+1) -> (width, B, n0+1), MSB first.

    Bits come out least significant first: the current lowest bit is shifted
    into the top position and key-switched to level 0, which is that bit's
    encryption.  A sign bootstrap back to ``level`` then rebuilds the bit at
    its original weight so it can be subtracted before the next round.
    """
    if level not in (1, 2):
        raise ValueError("bit extraction works on level-1 or level-2 ciphertexts")
    if width < 1 or width > 64 - delta_log:
        raise ConfigurationError(f"cannot extract {width} bits from a message scaled by 2^{delta_log}")
    n = keys.params.poly_degree(level)
    rows = data.shape[0]
    cur = np.array(data, dtype=U64, copy=True)
    out = np.empty((width, rows, keys.params.n0 + 1), dtype=U64)
    for i in range(width):
        shifted = cur * U64(1 << (64 - delta_log - i - 1))
        bit = _to_level0(shifted, level, keys)
        sched.stats.record("bit_extract", keyswitch=rows * level)
        out[width - 1 - i] = bit
        if i == width - 1:
            break
        weight = 1 << (delta_log + i - 1)
        probe = bit.copy()
        probe[:, -1] += U64(1 << 62)
        test = np.full((1, n), U64((-weight) % 2**64), dtype=U64)
        back = sched.pbs_level0(probe, test, np.zeros(rows, dtype=np.int64), level, stage="bit_extract")
        back[:, -1] += U64(weight)
        cur -= back
    return out


def extract_bits(ct: LweCiphertext, width: int, keys: KeyBundle, sched: Scheduler | None = None,
                 delta_log: int = BLOCK_DELTA_LOG) -> ExtractedBits:
    """Encrypted bits of the ``width``-bit message ``m * 2^delta_log`` carried by ``ct``."""
    sched = sched or Scheduler(keys)
    lead = ct.data.shape[:-1]
    flat = np.ascontiguousarray(ct.data.reshape(-1, ct.data.shape[-1]))
    bits = extract_bits_raw(flat, width, ct.level, keys, sched, delta_log)
    return ExtractedBits(LweCiphertext(bits.reshape((width,) + lead + (bits.shape[-1],)), 0))


# ---------------------------------------------------------------------------
# Circuit bootstrapping
# ---------------------------------------------------------------------------


def circuit_bootstrap_raw(bits: np.ndarray, keys: KeyBundle, sched: Scheduler) -> np.ndarray:
    """Level-0 bits (B, n0+1) at scale 2^63 -> GGSW rows (B, (k+1)*l, k+1, N1).

    Per gadget level ``j`` a sign bootstrap to level 2 yields ``b * g_j`` and a
    private functional key switch turns it into the ``k+1`` GLWE rows
    ``b * g_j * (-S_c)`` and ``b * g_j`` of that level.
    """
    p = keys.params
    gad = p.bk_cmux
    k, n1, n2 = p.k, p.n1_poly, p.n2_poly
    rows = bits.shape[0]
    probe = np.array(bits, dtype=U64, copy=True)
    probe[:, -1] += U64(1 << 62)
    out = np.empty((rows, (k + 1) * gad.length, k + 1, n1), dtype=U64)
    pf = keys.pfks
    for j in range(gad.length):
        half = 1 << (64 - (j + 1) * gad.base_log - 1)
        test = np.full((1, n2), U64((-half) % 2**64), dtype=U64)
        lvl2 = sched.pbs_level0(probe, test, np.zeros(rows, dtype=np.int64), 2, stage="circuit_bootstrap")
        lvl2[:, -1] += U64(half)
        digits = gadget_decompose(lvl2[:, :-1], pf.gadget.base_log, pf.gadget.length).reshape(rows, -1)
        glwes = (U64(0) - pf.matrix.dot(digits, 1 << (pf.gadget.base_log - 1))).reshape(rows, k + 1, k + 1, n1)
        body = lvl2[:, -1]
        for c in range(k + 1):
            glwes[:, c, c, 0] += body
            out[:, c * gad.length + j] = glwes[:, c]
    sched.stats.record("circuit_bootstrap", keyswitch=rows * gad.length)
    return out


def circuit_bootstrap(bit: LweCiphertext, keys: KeyBundle, sched: Scheduler | None = None) -> GgswCiphertext:
    """GGSW encryption, at the CMux gadget, of the bit carried by the level-0 ``bit``."""
    if bit.level != 0:
        raise ValueError("circuit bootstrapping expects a level-0 bit")
    sched = sched or Scheduler(keys)
    lead = bit.data.shape[:-1]
    flat = np.ascontiguousarray(bit.data.reshape(-1, bit.data.shape[-1]))
    out = circuit_bootstrap_raw(flat, keys, sched)
    out = out.reshape(lead + out.shape[1:])
    g = keys.params.bk_cmux
    return GgswCiphertext(out, 1, g.base_log, g.length)


# ---------------------------------------------------------------------------
# Vertical packing
# ---------------------------------------------------------------------------

_TREE_POLY_BUDGET = 4096  # GLWEs held at once in one CMux tree pass


def _table_polys(digits: np.ndarray, n: int) -> np.ndarray:
    """Digit table -> (polys, n) block words, low index bits along each polynomial."""
    size = digits.shape[0]
    words = digits.astype(U64) << U64(BLOCK_DELTA_LOG)
    if size < n:
        poly = np.zeros((1, n), dtype=U64)
        poly[0, :size] = words
        return poly
    return words.reshape(size // n, n)


def _cmux_tree(glwes: np.ndarray, ggsw_f: np.ndarray, gad, cfg) -> np.ndarray:
    """Fold (G, P, k+1, N) GLWEs down to (G, k+1, N) using ``ggsw_f[t]`` for tree level ``t``."""
    g, polys = glwes.shape[:2]
    level = 0
    while polys > 1:
        cur = glwes.reshape(g, polys // 2, 2, *glwes.shape[2:])
        d0 = np.ascontiguousarray(cur[:, :, 0])
        diff = np.ascontiguousarray(cur[:, :, 1]) - d0
        b = g * (polys // 2)
        flat = d0.reshape(b, *d0.shape[2:])
        external_product_add(diff.reshape(b, *diff.shape[2:]), ggsw_f[level], gad.base_log, gad.length, flat, cfg)
        glwes = flat.reshape(g, polys // 2, *d0.shape[2:])
        polys //= 2
        level += 1
    return glwes[:, 0]


def vertical_pack_one(ggsw_fourier: np.ndarray, table: LookupTable, keys: KeyBundle, cfg,
                      blocks: list[int] | None = None) -> np.ndarray:
    """Lookup for one input: ``ggsw_fourier`` (p, M, R, C) MSB-first bits -> (blocks, N1+1) LWEs."""
    p = table.input_bits
    params = keys.params
    n = params.n1_poly
    k = params.k
    gad = params.bk_cmux
    log_n = n.bit_length() - 1
    low = min(p, log_n)
    high = p - low
    blocks = list(range(table.block_count)) if blocks is None else blocks
    polys = 1 << high
    group = max(1, _TREE_POLY_BUDGET // polys)
    # tree levels use the high bits from least to most significant
    tree_f = [ggsw_fourier[high - 1 - t] for t in range(high)]
    accs = np.zeros((len(blocks), k + 1, n), dtype=U64)
    for start in range(0, len(blocks), group):
        chunk = blocks[start:start + group]
        glwes = np.zeros((len(chunk), polys, k + 1, n), dtype=U64)
        for gi, blk in enumerate(chunk):
            glwes[gi, :, k, :] = _table_polys(table.block_digits(blk), n)
        accs[start:start + len(chunk)] = _cmux_tree(glwes, tree_f, gad, cfg) if high else glwes[:, 0]
    # blind rotation by minus the low index: bit of weight 2^q multiplies by X^(-2^q)
    ws = ExternalProductWorkspace(len(blocks), k, n, gad.length)
    diff = np.empty_like(accs)
    for q in range(low):
        rots = np.full(len(blocks), 2 * n - (1 << q), dtype=np.int64)
        _rotate_sub(accs, rots, diff)
        external_product_add(diff, ggsw_fourier[p - 1 - q], gad.base_log, gad.length, accs, cfg, ws)
    return sample_extract_raw(accs, 0)


def vertical_pack(ggsw: GgswCiphertext, table: LookupTable, keys: KeyBundle,
                  sched: Scheduler | None = None) -> LweCiphertext:
    """Table lookup driven by GGSW bits ``ggsw.data`` (p, ..., R, C, N), MSB first.

    Returns level-1 block ciphertexts of shape ``(table.block_count, ..., N1+1)``.
    """
    p = table.input_bits
    if ggsw.data.shape[0] != p:
        raise ValueError(f"table needs {p} index bits, got {ggsw.data.shape[0]}")
    sched = sched or Scheduler(keys)
    lead = ggsw.data.shape[1:-3]
    flat = ggsw.data.reshape((p, -1) + ggsw.data.shape[-3:])
    out = _vertical_pack_batch(flat, table, keys, sched)
    return LweCiphertext(out.reshape((out.shape[0],) + lead + (out.shape[-1],)), 1)


def _vertical_pack_batch(ggsw_rows: np.ndarray, table: LookupTable, keys: KeyBundle, sched: Scheduler,
                         blocks: list[int] | None = None) -> np.ndarray:
    """(p, B, R, C, N) GGSW bits -> (blocks, B, N1+1), inputs spread over the worker pool."""
    p, b = ggsw_rows.shape[:2]
    cfg = sched.cfg
    nblocks = table.block_count if blocks is None else len(blocks)
    t0 = time.perf_counter()

    def run(a, z):
        res = []
        for i in range(a, z):
            f = ggsw_to_fourier(np.ascontiguousarray(ggsw_rows[:, i]), cfg)
            res.append(vertical_pack_one(f, table, keys, cfg, blocks))
        return res

    parts = sched.map_rows(run, b)
    outs = [r for part in parts for r in part]
    high = max(0, p - (keys.params.n1_poly.bit_length() - 1))
    low = p - high
    sched.stats.record("vertical_pack", cmux=b * nblocks * ((1 << high) - 1 + low),
                       seconds=time.perf_counter() - t0)
    return np.stack(outs, axis=1)


# ---------------------------------------------------------------------------
# WoP-PBS
# ---------------------------------------------------------------------------


def check_input_bits(bits: int) -> None:
    if bits > MAX_INPUT_BITS:
        raise ConfigurationError(
            f"lookups are limited to {MAX_INPUT_BITS} input bits; noise growth makes {bits} unreliable")


def wop_pbs_raw(blocks: np.ndarray, widths: list[int], table: LookupTable, keys: KeyBundle,
                sched: Scheduler, out_blocks: list[int] | None = None) -> np.ndarray:
    """Lookup on level-1 radix blocks ``blocks`` (nb, B, n1+1), least significant first.

    Block ``i`` supplies ``widths[i]`` index bits.  The table index is
    ``sum_i block_i * 2^(widths[0] + ... + widths[i-1])``.  Returns
    ``(len(out_blocks), B, n1+1)`` level-1 block ciphertexts.
    """
    nb, b = blocks.shape[:2]
    if len(widths) != nb:
        raise ValueError("one width per block is required")
    total = sum(widths)
    check_input_bits(table.input_bits)
    if total != table.input_bits:
        raise ValueError(f"blocks carry {total} bits but the table expects {table.input_bits}")
    # extract all blocks of equal width together, one batch per bit round
    bits_of_block: list[np.ndarray | None] = [None] * nb
    for w in sorted(set(widths)):
        sel = [i for i in range(nb) if widths[i] == w]
        data = np.ascontiguousarray(blocks[sel].reshape(len(sel) * b, -1))
        ext = extract_bits_raw(data, w, 1, keys, sched).reshape(w, len(sel), b, -1)
        for pos, i in enumerate(sel):
            bits_of_block[i] = ext[:, pos]
    # MSB first over the whole index: most significant block first
    msb_first = np.concatenate([bits_of_block[i] for i in reversed(range(nb))], axis=0)  # (p, B, n0+1)
    p = msb_first.shape[0]
    ggsw = circuit_bootstrap_raw(np.ascontiguousarray(msb_first.reshape(p * b, -1)), keys, sched)
    ggsw = ggsw.reshape((p, b) + ggsw.shape[1:])
    return _vertical_pack_batch(ggsw, table, keys, sched, out_blocks)


def wop_pbs(ct_blocks: list[LweCiphertext] | LweCiphertext, table: LookupTable, keys: KeyBundle,
            sched: Scheduler | None = None, widths: list[int] | None = None) -> list[LweCiphertext]:
    """Evaluate ``table`` at the index carried by level-1 radix blocks (least significant first).

    Each block holds ``widths[i]`` bits (2 by default).  Returns one level-1
    block ciphertext per output block of the table, entries in order and each
    entry least significant block first.
    """
    if isinstance(ct_blocks, LweCiphertext):
        stacked = ct_blocks.data
        if ct_blocks.level != 1:
            raise ValueError("lookups take level-1 blocks")
    else:
        if any(c.level != 1 for c in ct_blocks):
            raise ValueError("lookups take level-1 blocks")
        stacked = np.stack([c.data for c in ct_blocks])
    nb = stacked.shape[0]
    lead = stacked.shape[1:-1]
    flat = np.ascontiguousarray(stacked.reshape(nb, -1, stacked.shape[-1]))
    if widths is None:
        widths = [BLOCK_BITS] * nb
    sched = sched or Scheduler(keys)
    out = wop_pbs_raw(flat, widths, table, keys, sched)
    return [LweCiphertext(o.reshape(lead + (o.shape[-1],)), 1) for o in out]
