"""Radix-4 fixed-point arithmetic on block ciphertexts.

A fixed-point value is a list of 2-bit radix blocks, least significant
first.  Each block is an LWE ciphertext at level 1 encrypting a small
integer ``v * 2^59``; the PBS message space holds 4 bits, so a block may
temporarily grow to 15 before a carry propagation has to clean it up.  The
per-block worst-case values are tracked in plaintext (``bounds``).

Every operator is written once against an :class:`Engine`.  The
:class:`CryptoEngine` runs it on ciphertexts; the :class:`MirrorEngine` runs
the identical block-level steps on plaintext integers and is the bit-exact
reference for the encrypted results.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .batch import Scheduler
from .boot import test_polynomial
from .torus import U64, KeyBundle, encode, read_record, write_record
from .wop import BLOCK_DELTA_LOG, LookupTable, wop_pbs_raw

PBS_SPACE = 16  # values a block may hold before it must be cleaned


class ContractError(ValueError):
    """An operator was called outside its documented preconditions."""


# ---------------------------------------------------------------------------
# Formats
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedPointFormat:
    integer_bits: int
    fractional_bits: int
    signed: bool = False

    def __post_init__(self):
        if (self.integer_bits + self.fractional_bits) % 2:
            raise ValueError("total bit count must be even (2-bit blocks)")
        if self.integer_bits < 0 or self.fractional_bits < 0:
            raise ValueError("bit counts must be non-negative")

    @property
    def total_bits(self) -> int:
        return self.integer_bits + self.fractional_bits

    @property
    def block_count(self) -> int:
        return self.total_bits // 2

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.fractional_bits

    def encode(self, values) -> np.ndarray:
        """Reals -> raw integers (two's complement modulo 2^total for signed formats)."""
        v = np.asarray(values, dtype=np.float64)
        raw = np.rint(v * 2.0 ** self.fractional_bits)
        lo = -(2.0 ** (self.total_bits - 1)) if self.signed else 0.0
        hi = 2.0 ** (self.total_bits - 1) if self.signed else 2.0 ** self.total_bits
        if np.any(raw < lo) or np.any(raw >= hi):
            raise OverflowError(f"value out of range for {self}")
        return raw.astype(np.int64) & ((1 << self.total_bits) - 1)

    def decode(self, raw) -> np.ndarray:
        r = np.asarray(raw, dtype=np.int64) & ((1 << self.total_bits) - 1)
        if self.signed:
            r = np.where(r >= 1 << (self.total_bits - 1), r - (1 << self.total_bits), r)
        return r.astype(np.float64) * 2.0 ** -self.fractional_bits

    def to_blocks(self, raw) -> np.ndarray:
        r = np.asarray(raw, dtype=np.int64)
        return np.stack([(r >> (2 * i)) & 3 for i in range(self.block_count)])

    def from_blocks(self, blocks) -> np.ndarray:
        """Blocks (nb, ...) of any size below 16 -> raw value modulo 2^total.

        Formats wider than 62 bits return Python integers (object arrays).
        """
        b = np.asarray(blocks, dtype=np.int64)
        wide = self.total_bits > 62
        raw = np.zeros(b.shape[1:], dtype=object if wide else np.int64)
        for i in range(b.shape[0]):
            raw = raw + (b[i].astype(object) << (2 * i) if wide else b[i] << (2 * i))
        return raw % (1 << self.total_bits) if wide else raw & ((1 << self.total_bits) - 1)


SOFTMAX_FORMAT = FixedPointFormat(12, 20, signed=True)
EXP_FORMAT = FixedPointFormat(12, 20)
GELU_FORMAT = FixedPointFormat(12, 20, signed=True)
LAYERNORM_FORMAT = FixedPointFormat(14, 20, signed=True)
VARIANCE_FORMAT = FixedPointFormat(12, 40)


# ---------------------------------------------------------------------------
# Values and engines
# ---------------------------------------------------------------------------


@dataclass
class Fx:
    """A batch of fixed-point values: block columns, format and per-block value bounds."""

    cols: list
    fmt: FixedPointFormat
    bounds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.bounds:
            self.bounds = [3] * len(self.cols)
        if len(self.cols) != len(self.bounds):
            raise ValueError("one bound per block is required")

    @property
    def is_clean(self) -> bool:
        return max(self.bounds, default=0) <= 3

    def with_format(self, fmt: FixedPointFormat) -> "Fx":
        if fmt.block_count != len(self.cols):
            raise ValueError("block count mismatch")
        return Fx(list(self.cols), fmt, list(self.bounds))


def lut(fn) -> tuple[int, ...]:
    """16-entry block table from ``fn(v)``."""
    return tuple(int(fn(v)) for v in range(PBS_SPACE))


def lut2(fn) -> tuple[int, ...]:
    """16-entry table of ``fn(hi, lo)`` for inputs packed as ``4 * hi + lo``."""
    return tuple(int(fn(v >> 2, v & 3)) for v in range(PBS_SPACE))


MSG = lut(lambda v: v & 3)
CARRY = lut(lambda v: v >> 2)
NONZERO = lut(lambda v: int(v != 0))


class Engine:
    """Block-level primitives shared by the encrypted path and the plaintext mirror."""

    def const(self, value: int, batch: int):
        raise NotImplementedError

    def add(self, a, b):
        raise NotImplementedError

    def scale(self, a, k: int):
        raise NotImplementedError

    def add_scalar(self, a, v: int):
        raise NotImplementedError

    def batch(self, col) -> int:
        raise NotImplementedError

    def concat(self, cols: list):
        raise NotImplementedError

    def split(self, col, sizes: list[int]) -> list:
        raise NotImplementedError

    def pbs(self, jobs: list[tuple[object, tuple[int, ...]]], stage: str = "pbs") -> list:
        """Apply 16-entry tables to blocks; all jobs form one batch."""
        raise NotImplementedError

    def lookup(self, cols: list, widths: list[int], table: LookupTable, stage: str = "lookup") -> list:
        """Table lookup at index ``sum_i cols[i] << (widths[0] + ... + widths[i-1])``."""
        raise NotImplementedError

    def lin(self, terms: list[tuple[object, int]], offset: int = 0):
        """sum_i k_i * col_i + offset."""
        acc = None
        for col, k in terms:
            t = col if k == 1 else self.scale(col, k)
            acc = t if acc is None else self.add(acc, t)
        if offset:
            acc = self.add_scalar(acc, offset)
        return acc


class MirrorEngine(Engine):
    """Plaintext blocks as int64 arrays; asserts the 4-bit message space on every PBS."""

    def __init__(self):
        self.pbs_count = 0
        self.max_seen = 0

    def const(self, value, batch):
        return np.full(batch, value, dtype=np.int64)

    def add(self, a, b):
        return a + b

    def scale(self, a, k):
        return a * k

    def add_scalar(self, a, v):
        return a + v

    def batch(self, col):
        return col.shape[0]

    def concat(self, cols):
        return np.concatenate(cols)

    def split(self, col, sizes):
        return np.split(col, np.cumsum(sizes)[:-1])

    def _check(self, col):
        if col.size and (col.min() < 0 or col.max() >= PBS_SPACE):
            raise ContractError(f"block value {int(col.max())} outside the PBS message space")
        self.max_seen = max(self.max_seen, int(col.max(initial=0)))

    def pbs(self, jobs, stage="pbs"):
        out = []
        for col, table in jobs:
            self._check(col)
            out.append(np.asarray(table, dtype=np.int64)[col])
            self.pbs_count += col.size
        return out

    def lookup(self, cols, widths, table, stage="lookup"):
        idx = np.zeros_like(cols[0])
        shift = 0
        for c, w in zip(cols, widths):
            self._check(c)
            if c.size and c.max() >= 1 << w:
                raise ContractError("lookup index block wider than its declared width")
            idx = idx + (c << shift)
            shift += w
        return [table.block_digits(b)[idx].astype(np.int64) for b in range(table.block_count)]


class CryptoEngine(Engine):
    """Level-1 LWE blocks ``(B, n1 + 1)``; PBS and lookups go through a :class:`Scheduler`."""

    def __init__(self, keys: KeyBundle, sched: Scheduler | None = None):
        self.keys = keys
        self.sched = sched or Scheduler(keys)
        self.width = keys.params.n1 + 1
        self._polys: dict[tuple[int, ...], np.ndarray] = {}

    def const(self, value, batch):
        out = np.zeros((batch, self.width), dtype=U64)
        out[:, -1] = encode(value, 64 - BLOCK_DELTA_LOG)
        return out

    def add(self, a, b):
        return a + b

    def scale(self, a, k):
        return a * U64(k % 2**64)

    def add_scalar(self, a, v):
        out = a.copy()
        out[:, -1] += encode(v, 64 - BLOCK_DELTA_LOG)
        return out

    def batch(self, col):
        return col.shape[0]

    def concat(self, cols):
        return np.concatenate(cols, axis=0)

    def split(self, col, sizes):
        return np.split(col, np.cumsum(sizes)[:-1], axis=0)

    def _poly(self, table):
        p = self._polys.get(table)
        if p is None:
            words = encode(np.asarray(table, dtype=np.int64) % PBS_SPACE, 64 - BLOCK_DELTA_LOG)
            p = test_polynomial(words, self.keys.params.n1_poly)
            self._polys[table] = p
        return p

    def pbs(self, jobs, stage="pbs"):
        if not jobs:
            return []
        tables = []
        pos: dict[tuple[int, ...], int] = {}
        idx = []
        for col, table in jobs:
            if table not in pos:
                pos[table] = len(tables)
                tables.append(self._poly(table))
            idx.append(np.full(col.shape[0], pos[table], dtype=np.int64))
        data = np.concatenate([c for c, _ in jobs], axis=0)
        res = self.sched.pbs(data, np.stack(tables), np.concatenate(idx), stage=stage)
        return np.split(res, np.cumsum([c.shape[0] for c, _ in jobs])[:-1], axis=0)

    def lookup(self, cols, widths, table, stage="lookup"):
        out = wop_pbs_raw(np.stack(cols), list(widths), table, self.keys, self.sched)
        return list(out)


# ---------------------------------------------------------------------------
# Multiplication schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MulSchedule:
    """Offline plan for a block product.

    ``pairs`` are the surviving partial products ``(i, j)``; product columns
    below ``col_lo`` are pruned, columns ``[col_lo, out_lo)`` are guard
    columns whose carries reach the output, and ``[out_lo, out_hi)`` are the
    output blocks.  ``passes`` lists, per reduction pass, the term groups
    ``(column, term ids)`` that are summed and split into a low digit and a
    carry by two PBS.
    """

    nb_a: int
    nb_b: int
    out_lo: int
    out_hi: int
    col_lo: int
    pairs: tuple[tuple[int, int], ...]
    passes: tuple[tuple[tuple[int, tuple[int, ...]], ...], ...]
    final_columns: tuple[tuple[int, ...], ...]
    pruned: tuple[tuple[int, int], ...]

    @property
    def pbs_count(self) -> int:
        """Upper bound on the PBS count (carry PBS that land outside the output are skipped)."""
        return 2 * len(self.pairs) + sum(2 * len(p) for p in self.passes)


def prune_floor(col_weights: dict[int, int], out_lo: int, budget_num: int = 1, budget_den: int = 1) -> int:
    """Lowest kept column such that the dropped columns sum below ``budget * 4^out_lo``.

    ``col_weights[s]`` bounds the total value landing in column ``s``.
    """
    limit = (budget_num * 4 ** out_lo) // budget_den
    dropped = 0
    lo = 0
    for s in sorted(col_weights):
        if s >= out_lo:
            break
        if dropped + col_weights[s] * 4 ** s < limit:
            dropped += col_weights[s] * 4 ** s
            lo = s + 1
        else:
            break
    return min(lo, out_lo)


def _plan_reduction(columns: dict[int, list[tuple[int, int]]], col_hi: int, next_id: int):
    """Group terms until every column sums below the PBS space.

    ``columns[s]`` holds ``(term id, bound)``.  Returns the passes, the final
    per-column term ids and their summed bounds.
    """
    passes = []
    while True:
        groups = []
        new_cols: dict[int, list[tuple[int, int]]] = {s: [] for s in columns}
        for s in sorted(columns):
            terms = columns[s]
            if sum(b for _, b in terms) < PBS_SPACE:
                new_cols[s].extend(terms)
                continue
            cur, cur_b = [], 0
            chunks = []
            for t, b in terms:
                if cur and cur_b + b >= PBS_SPACE:
                    chunks.append(cur)
                    cur, cur_b = [], 0
                cur.append((t, b))
                cur_b += b
            if cur:
                chunks.append(cur)
            for ch in chunks:
                total = sum(b for _, b in ch)
                groups.append((s, tuple(t for t, _ in ch), total))
        if not groups:
            break
        step = []
        for s, ids, total in groups:
            lo_id, hi_id = next_id, next_id + 1
            next_id += 2
            new_cols[s].append((lo_id, min(3, total)))
            if s + 1 < col_hi and total >> 2:
                new_cols.setdefault(s + 1, []).append((hi_id, total >> 2))
            step.append((s, ids))
        passes.append(tuple(step))
        columns = new_cols
    final = tuple(tuple(t for t, _ in columns.get(s, [])) for s in range(min(columns, default=0), col_hi))
    bounds = [sum(b for _, b in columns.get(s, [])) for s in range(min(columns, default=0), col_hi)]
    return tuple(passes), final, bounds


def schedule_mul(fmt_a: FixedPointFormat, fmt_b: FixedPointFormat, out_range: tuple[int, int] | None = None,
                 bound_a: list[int] | None = None, bound_b: list[int] | None = None) -> MulSchedule:
    """Plan the product of clean operands restricted to output blocks ``out_range``.

    Partial products whose total contribution below the output is smaller
    than one output unit are pruned (an exact bound on the dropped value, so
    the truncated result is off by at most one output ULP).  ``bound_a`` and
    ``bound_b`` are optional per-block value hints (default 3).
    """
    na, nb = fmt_a.block_count, fmt_b.block_count
    full = na + nb
    lo, hi = (0, full) if out_range is None else out_range
    if not 0 <= lo < hi:
        raise ValueError("empty output range")
    hi_eff = min(hi, full)
    ba = bound_a or [3] * na
    bb = bound_b or [3] * nb
    weights: dict[int, int] = {}
    for i in range(na):
        for j in range(nb):
            weights[i + j] = weights.get(i + j, 0) + ba[i] * bb[j]
    col_lo = prune_floor(weights, lo)
    pairs, pruned = [], []
    for i in range(na):
        for j in range(nb):
            s = i + j
            if ba[i] == 0 or bb[j] == 0:
                continue
            if col_lo <= s < hi_eff:
                pairs.append((i, j))
            elif s < col_lo:
                pruned.append((i, j))
    columns: dict[int, list[tuple[int, int]]] = {s: [] for s in range(col_lo, hi_eff)}
    tid = 0
    for i, j in pairs:
        prod = ba[i] * bb[j]
        columns[i + j].append((tid, min(3, prod)))
        if i + j + 1 < hi_eff and prod >> 2:
            columns[i + j + 1].append((tid + 1, prod >> 2))
        tid += 2
    passes, final, _ = _plan_reduction(columns, hi_eff, tid)
    return MulSchedule(na, nb, lo, hi, col_lo, tuple(pairs), passes, final, tuple(pruned))


def merge_schedules(plans: list[MulSchedule]) -> list[list[int]]:
    """Pass-aligned PBS counts when several independent products run together.

    Entry ``k`` lists each plan's PBS count in merged batch ``k`` (the
    partial-product batch first, then one batch per reduction pass).
    """
    depth = max(len(p.passes) for p in plans) + 1
    out = []
    for k in range(depth):
        row = []
        for p in plans:
            if k == 0:
                row.append(2 * len(p.pairs))
            elif k - 1 < len(p.passes):
                row.append(2 * len(p.passes[k - 1]))
            else:
                row.append(0)
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


PRODUCT_LO = lut2(lambda a, b: (a * b) & 3)
PRODUCT_HI = lut2(lambda a, b: (a * b) >> 2)


def _digits4(v: int) -> list[int]:
    out = []
    while v:
        out.append(v & 3)
        v >>= 2
    return out


@lru_cache(maxsize=None)
def const_digit_tables(c: int) -> tuple[tuple[int, ...], ...]:
    """Per output digit ``t`` the table ``v -> digit t of v * c`` for block values v < 4."""
    width = len(_digits4(3 * c))
    return tuple(lut(lambda v, t=t: ((v & 3) * c >> (2 * t)) & 3) for t in range(width))


class Arith:
    """Fixed-point operators over an :class:`Engine`."""

    def __init__(self, engine: Engine):
        self.eng = engine

    # -- construction ------------------------------------------------------

    def const(self, raw, fmt: FixedPointFormat, batch: int) -> Fx:
        """Plaintext constant ``raw`` (python int) as trivial blocks."""
        digits = [(int(raw) >> (2 * i)) & 3 for i in range(fmt.block_count)]
        return Fx([self.eng.const(d, batch) for d in digits], fmt, digits)

    def batch(self, x: Fx) -> int:
        return self.eng.batch(x.cols[0])

    def concat(self, xs: list[Fx]) -> Fx:
        fmt = xs[0].fmt
        if any(x.fmt != fmt for x in xs):
            raise ValueError("formats differ")
        cols = [self.eng.concat([x.cols[i] for x in xs]) for i in range(fmt.block_count)]
        bounds = [max(x.bounds[i] for x in xs) for i in range(fmt.block_count)]
        return Fx(cols, fmt, bounds)

    def split(self, x: Fx, sizes: list[int]) -> list[Fx]:
        parts = [self.eng.split(c, sizes) for c in x.cols]
        return [Fx([p[k] for p in parts], x.fmt, list(x.bounds)) for k in range(len(sizes))]

    def resize(self, x: Fx, fmt: FixedPointFormat, shift_blocks: int = 0, sign_extend: bool = False) -> Fx:
        """Reinterpret ``x`` in ``fmt``: drop ``shift_blocks`` low blocks (or pad when negative), pad or cut on top.

        Sign extension needs a clean ``x`` and costs one PBS on the top block.
        """
        cols, bounds = list(x.cols), list(x.bounds)
        b = self.batch(x)
        if shift_blocks >= 0:
            cols, bounds = cols[shift_blocks:], bounds[shift_blocks:]
        else:
            cols = [self.eng.const(0, b)] * (-shift_blocks) + cols
            bounds = [0] * (-shift_blocks) + bounds
        need = fmt.block_count
        if len(cols) < need:
            if sign_extend:
                if not x.is_clean:
                    raise ContractError("sign extension needs a clean value")
                (ext,) = self.eng.pbs([(cols[-1], lut(lambda v: 3 * ((v >> 1) & 1)))], stage="sign_extend")
                cols += [ext] * (need - len(cols))
                bounds += [3] * (need - len(bounds))
            else:
                cols += [self.eng.const(0, b)] * (need - len(cols))
                bounds += [0] * (need - len(bounds))
        return Fx(cols[:need], fmt, bounds[:need])

    # -- linear operations -------------------------------------------------

    def add(self, a: Fx, b: Fx) -> Fx:
        if a.fmt.block_count != b.fmt.block_count:
            raise ValueError("operands need the same block count")
        bounds = [x + y for x, y in zip(a.bounds, b.bounds)]
        if max(bounds) >= PBS_SPACE:
            raise ContractError("carry headroom exhausted; propagate carries first")
        return Fx([self.eng.add(x, y) for x, y in zip(a.cols, b.cols)], a.fmt, bounds)

    def add_raw(self, a: Fx, raw: int) -> Fx:
        """Add a plaintext raw constant (no PBS)."""
        cols, bounds = list(a.cols), list(a.bounds)
        for i in range(len(cols)):
            d = (int(raw) >> (2 * i)) & 3
            if d:
                cols[i] = self.eng.add_scalar(cols[i], d)
                bounds[i] += d
        if max(bounds) >= PBS_SPACE:
            raise ContractError("carry headroom exhausted; propagate carries first")
        return Fx(cols, a.fmt, bounds)

    def complement(self, a: Fx) -> Fx:
        """Blockwise 3 - a_i (bitwise not) of a clean value."""
        if not a.is_clean:
            raise ContractError("complement needs a clean value")
        return Fx([self.eng.add_scalar(self.eng.scale(c, -1), 3) for c in a.cols], a.fmt, [3] * len(a.cols))

    def negate(self, a: Fx) -> Fx:
        """Two's complement negation (blocks left unpropagated)."""
        return self.add_raw(self.complement(a), 1)

    def sub(self, a: Fx, b: Fx) -> Fx:
        """a - b modulo 2^total, propagated."""
        return self.propagate(self.add(a, self.negate(b)))

    # -- carry propagation -------------------------------------------------

    def propagate(self, x: Fx, keep_carry: bool = False):
        return self.propagate_many([x], keep_carry)[0]

    def propagate_many(self, xs: list[Fx], keep_carry: bool = False) -> list:
        """Clean every block of every value (carry out of the top block dropped).

        While some block may exceed 7, all dirty blocks split in parallel into
        a message and a carry PBS.  A ripple pass then moves the remaining
        carries (at most 1) upward one block at a time.  With ``keep_carry``
        the carry out of the top block is returned as a bit column alongside
        each value.
        """
        eng = self.eng
        states = [(list(x.cols), list(x.bounds)) for x in xs]
        tops = [None] * len(xs)
        for cols, bounds in states:
            if max(bounds, default=0) >= PBS_SPACE:
                raise ContractError("block bound exceeds the PBS message space")

        def run(requests):
            jobs = [(states[v][0][i], t) for v, i, t in requests]
            return eng.pbs(jobs, stage="propagate")

        while any(max(b) > 7 for _, b in states):
            reqs = []
            for v, (cols, bounds) in enumerate(states):
                if max(bounds) <= 7:
                    continue
                for i, bd in enumerate(bounds):
                    if bd > 3:
                        reqs.append((v, i, MSG))
                        if i + 1 < len(cols) or keep_carry:
                            reqs.append((v, i, CARRY))
            res = run(reqs)
            pending = {}
            for (v, i, t), r in zip(reqs, res):
                pending[(v, i, t)] = r
            for v, (cols, bounds) in enumerate(states):
                old = list(bounds)
                for i in range(len(cols)):
                    if (v, i, MSG) in pending:
                        cols[i] = pending[(v, i, MSG)]
                        bounds[i] = 3
                for i in range(len(cols)):
                    if (v, i, CARRY) in pending:
                        c, cb = pending[(v, i, CARRY)], old[i] >> 2
                        if i + 1 < len(cols):
                            cols[i + 1] = eng.add(cols[i + 1], c)
                            bounds[i + 1] += cb
                        else:
                            tops[v] = c if tops[v] is None else eng.add(tops[v], c)
        width = max((len(c) for c, _ in states), default=0)
        for i in range(width):
            reqs = []
            for v, (cols, bounds) in enumerate(states):
                if i < len(cols) and bounds[i] > 3:
                    reqs.append((v, i, MSG))
                    if i + 1 < len(cols) or keep_carry:
                        reqs.append((v, i, CARRY))
            if not reqs:
                continue
            res = run(reqs)
            for (v, j, t), r in zip(reqs, res):
                cols, bounds = states[v]
                if t is CARRY:
                    if j + 1 < len(cols):
                        cols[j + 1] = eng.add(cols[j + 1], r)
                        bounds[j + 1] += bounds[j] >> 2
                    else:
                        tops[v] = r if tops[v] is None else eng.add(tops[v], r)
            for (v, j, t), r in zip(reqs, res):
                if t is MSG:
                    states[v][0][j] = r
                    states[v][1][j] = 3
        out = [Fx(c, x.fmt, b) for (c, b), x in zip(states, xs)]
        if keep_carry:
            return [(o, t if t is not None else eng.const(0, self.batch(o))) for o, t in zip(out, tops)]
        return out

    # -- multiplication ----------------------------------------------------

    def execute_mul(self, a: Fx, b: Fx, plan: MulSchedule, out_fmt: FixedPointFormat | None = None) -> Fx:
        return self.execute_mul_many([(a, b, plan, out_fmt)])[0]

    def execute_mul_many(self, items: list[tuple[Fx, Fx, MulSchedule, FixedPointFormat | None]]) -> list[Fx]:
        """Run several planned products with their PBS batches merged pass by pass."""
        eng = self.eng
        for a, b, plan, _ in items:
            if (a.fmt.block_count, b.fmt.block_count) != (plan.nb_a, plan.nb_b):
                raise ValueError("operand formats do not match the plan")
            if not (a.is_clean and b.is_clean):
                raise ContractError("multiplication needs clean operands")
        terms: list[dict[int, object]] = [dict() for _ in items]
        bounds: list[dict[int, int]] = [dict() for _ in items]
        jobs, keys = [], []
        for v, (a, b, plan, _) in enumerate(items):
            hi_eff = min(plan.out_hi, plan.nb_a + plan.nb_b)
            for p, (i, j) in enumerate(plan.pairs):
                packed = eng.lin([(a.cols[i], 4), (b.cols[j], 1)])
                prod = a.bounds[i] * b.bounds[j]
                jobs.append((packed, PRODUCT_LO))
                keys.append((v, 2 * p, min(3, prod)))
                if i + j + 1 < hi_eff and prod >> 2:
                    jobs.append((packed, PRODUCT_HI))
                    keys.append((v, 2 * p + 1, prod >> 2))
        for (v, t, bd), r in zip(keys, eng.pbs(jobs, stage="mul_products")):
            terms[v][t] = r
            bounds[v][t] = bd
        return self._finish_columns(items, terms, bounds)

    def _finish_columns(self, items, terms, bounds) -> list[Fx]:
        """Execute reduction passes and the final propagation of planned products."""
        eng = self.eng
        depth = max(len(it[2].passes) for it in items)
        next_id = [2 * len(it[2].pairs) if it[2].pairs else 0 for it in items]
        for k in range(depth):
            jobs, keys = [], []
            for v, it in enumerate(items):
                plan = it[2]
                if k >= len(plan.passes):
                    continue
                base = next_id[v]
                hi_eff = min(plan.out_hi, plan.nb_a + plan.nb_b)
                for g, (s, ids) in enumerate(plan.passes[k]):
                    acc = eng.lin([(terms[v][t], 1) for t in ids])
                    total = sum(bounds[v][t] for t in ids)
                    jobs.append((acc, MSG))
                    keys.append((v, base + 2 * g, min(3, total)))
                    if s + 1 < hi_eff and total >> 2:
                        jobs.append((acc, CARRY))
                        keys.append((v, base + 2 * g + 1, total >> 2))
                next_id[v] = base + 2 * len(plan.passes[k])
            for (v, t, bd), r in zip(keys, eng.pbs(jobs, stage="mul_reduce")):
                terms[v][t] = r
                bounds[v][t] = bd
        values = []
        for v, (a, b, plan, out_fmt) in enumerate(items):
            batch = self.batch(a)
            hi_eff = min(plan.out_hi, plan.nb_a + plan.nb_b)
            cols, bds = [], []
            for s, ids in zip(range(plan.col_lo, hi_eff), plan.final_columns):
                if ids:
                    cols.append(eng.lin([(terms[v][t], 1) for t in ids]))
                    bds.append(sum(bounds[v][t] for t in ids))
                else:
                    cols.append(eng.const(0, batch))
                    bds.append(0)
            width = plan.out_hi - plan.col_lo
            cols += [eng.const(0, batch)] * (width - len(cols))
            bds += [0] * (width - len(bds))
            values.append((Fx(cols, FixedPointFormat(0, 2 * width), bds), plan, out_fmt))
        cleaned = self.propagate_many([x for x, _, _ in values])
        out = []
        for x, (_, plan, out_fmt) in zip(cleaned, values):
            cut = plan.out_lo - plan.col_lo
            nblk = plan.out_hi - plan.out_lo
            fmt = out_fmt or FixedPointFormat(0, 2 * nblk)
            if fmt.block_count != nblk:
                raise ValueError("output format does not match the planned output range")
            out.append(Fx(x.cols[cut:], fmt, x.bounds[cut:]))
        return out

    def mul(self, a: Fx, b: Fx, out_fmt: FixedPointFormat) -> Fx:
        """Truncated product of clean unsigned values in ``out_fmt`` (within one output ULP)."""
        return self.mul_many([(a, b, out_fmt)])[0]

    def mul_many(self, items: list[tuple[Fx, Fx, FixedPointFormat]]) -> list[Fx]:
        prepared = []
        for a, b, out_fmt in items:
            shift = a.fmt.fractional_bits + b.fmt.fractional_bits - out_fmt.fractional_bits
            if shift < 0 or shift % 2:
                raise ValueError("output scale must be an even number of bits below the product scale")
            lo = shift // 2
            plan = schedule_mul(a.fmt, b.fmt, (lo, lo + out_fmt.block_count), a.bounds, b.bounds)
            prepared.append((a, b, plan, out_fmt))
        return self.execute_mul_many(prepared)

    # -- products with plaintext constants ---------------------------------

    def _const_mul_columns(self, a: Fx, c: int, col_lo: int, col_hi: int, stage: str):
        """Digits of ``a_i * c`` via one PBS per nonzero digit, binned into columns."""
        eng = self.eng
        tables = const_digit_tables(c)
        jobs, place = [], []
        for i, col in enumerate(a.cols):
            if a.bounds[i] == 0:
                continue
            for t, table in enumerate(tables):
                s = i + t
                if not col_lo <= s < col_hi or not any(table[:a.bounds[i] + 1]):
                    continue
                jobs.append((col, table))
                place.append((s, max(table[:a.bounds[i] + 1])))
        res = eng.pbs(jobs, stage=stage)
        return res, place

    def _const_weights(self, a: Fx, c: int) -> dict[int, int]:
        w: dict[int, int] = {}
        for i, bd in enumerate(a.bounds):
            for t, table in enumerate(const_digit_tables(c)):
                m = max(table[:bd + 1])
                if m:
                    w[i + t] = w.get(i + t, 0) + m
        return w

    def _columns_to_value(self, res, place, col_lo, col_hi, batch, extra: dict[int, int] | None = None) -> Fx:
        """Reduce binned digit terms to one propagated value covering ``[col_lo, col_hi)``."""
        eng = self.eng
        columns: dict[int, list[tuple[int, int]]] = {s: [] for s in range(col_lo, col_hi)}
        store: dict[int, object] = {}
        bnd: dict[int, int] = {}
        for tid, (r, (s, bd)) in enumerate(zip(res, place)):
            columns[s].append((tid, bd))
            store[tid] = r
            bnd[tid] = bd
        extra = extra or {}
        for s, d in extra.items():
            tid = len(store)
            store[tid] = eng.const(d, batch)
            bnd[tid] = d
            columns[s].append((tid, d))
        passes, final, _ = _plan_reduction(columns, col_hi, len(store))
        next_id = len(store)
        for step in passes:
            jobs, keys = [], []
            for g, (s, ids) in enumerate(step):
                acc = eng.lin([(store[t], 1) for t in ids])
                total = sum(bnd[t] for t in ids)
                jobs.append((acc, MSG))
                keys.append((next_id + 2 * g, min(3, total)))
                if s + 1 < col_hi and total >> 2:
                    jobs.append((acc, CARRY))
                    keys.append((next_id + 2 * g + 1, total >> 2))
            next_id += 2 * len(step)
            for (t, bd), r in zip(keys, eng.pbs(jobs, stage="const_reduce")):
                store[t] = r
                bnd[t] = bd
        cols, bds = [], []
        for ids in final:
            if ids:
                cols.append(eng.lin([(store[t], 1) for t in ids]))
                bds.append(sum(bnd[t] for t in ids))
            else:
                cols.append(eng.const(0, batch))
                bds.append(0)
        width = col_hi - col_lo
        cols += [eng.const(0, batch)] * (width - len(cols))
        bds += [0] * (width - len(bds))
        return self.propagate(Fx(cols, FixedPointFormat(0, 2 * width), bds))

    def mul_const(self, a: Fx, c: int, out_fmt: FixedPointFormat, shift_blocks: int) -> Fx:
        """Truncated ``(a * c) >> (2 * shift_blocks)`` for a clean unsigned ``a`` and integer ``c >= 0``.

        The result is within one output ULP of the exact truncated product.
        """
        if not a.is_clean:
            raise ContractError("constant multiplication needs a clean operand")
        batch = self.batch(a)
        if c == 0:
            return self.const(0, out_fmt, batch)
        lo, hi = shift_blocks, shift_blocks + out_fmt.block_count
        col_lo = prune_floor(self._const_weights(a, c), lo)
        res, place = self._const_mul_columns(a, c, col_lo, hi, "mul_const")
        x = self._columns_to_value(res, place, col_lo, hi, batch)
        return Fx(x.cols[lo - col_lo:], out_fmt, x.bounds[lo - col_lo:])

    def div_const_digits(self, fmt: FixedPointFormat) -> int:
        """Base-4 digit count of the reciprocal: enough that a/4^K stays below 1/16 output unit."""
        return math.ceil((fmt.fractional_bits + 4) / 2) + math.ceil(fmt.integer_bits / 2)

    def div_const(self, a: Fx, d: int) -> Fx:
        """Round-to-nearest ``a / d`` for a clean unsigned ``a`` and plaintext integer ``d >= 1``.

        Powers of four are plain block shifts.  Otherwise ``a`` is multiplied
        by ``C = floor(4^K / d)``, i.e. the first ``K`` base-4 digits of
        ``1/d``, and the product is rounded at digit ``K``.  The result is
        within one unit of the last place of the exact quotient.
        """
        if d < 1:
            raise ZeroDivisionError("division by a non-positive constant")
        if not a.is_clean:
            raise ContractError("constant division needs a clean operand")
        batch = self.batch(a)
        m = d.bit_length() - 1
        if d == 1 << m and m % 2 == 0:
            return self.resize(a, a.fmt, shift_blocks=m // 2)
        k = self.div_const_digits(a.fmt)
        c = 4 ** k // d
        lo, hi = k, k + a.fmt.block_count
        weights = self._const_weights(a, c)
        weights[k - 1] = weights.get(k - 1, 0) + 2
        col_lo = prune_floor(weights, lo, 1, 4)
        col_lo = min(col_lo, k - 1)
        res, place = self._const_mul_columns(a, c, col_lo, hi, "div_const")
        x = self._columns_to_value(res, place, col_lo, hi, batch, extra={k - 1: 2})
        return Fx(x.cols[lo - col_lo:], a.fmt, x.bounds[lo - col_lo:])

    # -- selection, comparison, max ----------------------------------------

    def select(self, flag, a: Fx, b: Fx) -> Fx:
        """Blockwise ``flag ? a : b`` for a bit column ``flag`` and clean values."""
        return self.select_many([(flag, a, b)])[0]

    def select_many(self, items) -> list[Fx]:
        eng = self.eng
        take_a = lut2(lambda f, v: v if f & 1 else 0)
        take_b = lut2(lambda f, v: 0 if f & 1 else v)
        jobs = []
        for flag, a, b in items:
            if not (a.is_clean and b.is_clean) or a.fmt.block_count != b.fmt.block_count:
                raise ContractError("selection needs clean operands of equal width")
            for ca, cb, ba, bb in zip(a.cols, b.cols, a.bounds, b.bounds):
                if ba:
                    jobs.append((eng.lin([(flag, 4), (ca, 1)]), take_a))
                if bb:
                    jobs.append((eng.lin([(flag, 4), (cb, 1)]), take_b))
        res = iter(eng.pbs(jobs, stage="select"))
        out = []
        for flag, a, b in items:
            cols = []
            for ca, ba, bb in zip(a.cols, a.bounds, b.bounds):
                parts = ([next(res)] if ba else []) + ([next(res)] if bb else [])
                cols.append(eng.add(*parts) if len(parts) == 2 else parts[0] if parts else ca)
            out.append(Fx(cols, a.fmt, [max(x, y) for x, y in zip(a.bounds, b.bounds)]))
        return out

    def mask(self, flag, a: Fx, keep_when: int = 1) -> Fx:
        """Blockwise ``a`` where ``flag == keep_when`` else 0 (clean ``a``)."""
        return self.mask_many([(flag, a)], keep_when)[0]

    def mask_many(self, items, keep_when: int = 1) -> list[Fx]:
        eng = self.eng
        table = lut2(lambda f, v: v if (f & 1) == keep_when else 0)
        jobs = [(eng.lin([(flag, 4), (c, 1)]), table)
                for flag, a in items for c, bd in zip(a.cols, a.bounds) if bd]
        res = iter(eng.pbs(jobs, stage="mask"))
        out = []
        for flag, a in items:
            if not a.is_clean:
                raise ContractError("masking needs a clean value")
            cols = [next(res) if bd else c for c, bd in zip(a.cols, a.bounds)]
            out.append(Fx(cols, a.fmt, list(a.bounds)))
        return out

    def greater_equal_many(self, pairs: list[tuple[Fx, Fx]]) -> list:
        """Bit columns ``a >= b`` (signed when the format is signed) for clean operands.

        Each block pair is classified as below, equal or above with one
        bivariate PBS; a tree of PBS then keeps the most significant
        decision.
        """
        eng = self.eng
        jobs, spans = [], []
        for a, b in pairs:
            if not (a.is_clean and b.is_clean):
                raise ContractError("comparison needs clean operands")
            nb = len(a.cols)
            flip = 2 if a.fmt.signed else 0
            for i in range(nb):
                f = flip if i == nb - 1 else 0
                table = lut2(lambda x, y, f=f: (x ^ f > y ^ f) * 2 + (x ^ f == y ^ f))
                jobs.append((eng.lin([(a.cols[i], 4), (b.cols[i], 1)]), table))
            spans.append(nb)
        res = eng.pbs(jobs, stage="compare")
        levels, p = [], 0
        for nb in spans:
            levels.append(res[p:p + nb])
            p += nb
        combine = lut(lambda v: (v // 3 if v // 3 != 1 else v % 3) if v < 9 else 0)
        final = lut(lambda v: int((v // 3 if v // 3 != 1 else v % 3) != 0) if v < 9 else 0)
        single_final = lut(lambda v: int(v != 0))
        while True:
            jobs, owners = [], []
            done = all(len(lv) == 1 for lv in levels)
            if done:
                break
            for v, lv in enumerate(levels):
                if len(lv) == 1:
                    continue
                nxt = []
                last_round = len(lv) == 2
                for i in range(0, len(lv) - 1, 2):
                    lo_s, hi_s = lv[i], lv[i + 1]
                    jobs.append((eng.lin([(hi_s, 3), (lo_s, 1)]), final if last_round else combine))
                    nxt.append(None)
                if len(lv) % 2:
                    nxt.append(lv[-1])
                owners.append((v, nxt))
            res = eng.pbs(jobs, stage="compare")
            p = 0
            for v, nxt in owners:
                for k in range(len(nxt)):
                    if nxt[k] is None:
                        nxt[k] = res[p]
                        p += 1
                levels[v] = nxt
                if len(nxt) == 1:
                    levels[v] = [("bit", nxt[0])]
        out, jobs, need = [], [], []
        for v, lv in enumerate(levels):
            item = lv[0]
            if isinstance(item, tuple):
                out.append(item[1])
            else:
                out.append(None)
                jobs.append((item, single_final))
                need.append(v)
        for v, r in zip(need, eng.pbs(jobs, stage="compare")):
            out[v] = r
        return out

    def max2_many(self, pairs: list[tuple[Fx, Fx]]) -> list[Fx]:
        flags = self.greater_equal_many(pairs)
        return self.select_many([(f, a, b) for f, (a, b) in zip(flags, pairs)])

    def max_tree(self, xs: list[Fx]) -> Fx:
        """Maximum by a tournament of pairwise maxima; every round is one batch."""
        if not xs:
            raise ValueError("max of an empty list")
        level = list(xs)
        while len(level) > 1:
            pairs = [(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
            nxt = self.max2_many(pairs)
            if len(level) % 2:
                nxt.append(level[-1])
            level = nxt
        return level[0]

    # -- division ----------------------------------------------------------

    def div(self, a: Fx, b: Fx, quotient_bits: int | None = None) -> Fx:
        """Restoring division ``floor(a / b)`` in ``a``'s format for clean unsigned ``a``, ``b > 0``.

        The caller guarantees the quotient has at most ``quotient_bits`` raw
        bits (default: the whole format).  Each quotient bit costs one
        subtract-with-borrow over the active window and one selection.
        """
        if a.fmt != b.fmt:
            raise ValueError("division operands need the same format")
        if not (a.is_clean and b.is_clean):
            raise ContractError("division needs clean operands")
        fmt = a.fmt
        nb = fmt.block_count
        qbits = quotient_bits or fmt.total_bits
        if fmt.fractional_bits % 2:
            raise ValueError("fractional bits must be even")
        fb = fmt.fractional_bits // 2
        batch = self.batch(a)
        wfmt = FixedPointFormat(0, 2 * (nb + 1))
        b1 = self.resize(b, wfmt)
        b2 = self.propagate(self.add(b1, b1))
        # remainder holds a * 2^f; only blocks below the current window top can be nonzero
        rem_cols = [self.eng.const(0, batch)] * fb + list(a.cols)
        rem_bounds = [0] * fb + list(a.bounds)
        total_blocks = nb + fb
        qcols_bits = {}
        for t in range(qbits - 1, -1, -1):
            dv = b1 if t % 2 == 0 else b2
            base = t // 2
            top = min(base + nb + 1, max(total_blocks, base + nb + 1))
            while len(rem_cols) < top:
                rem_cols.append(self.eng.const(0, batch))
                rem_bounds.append(0)
            window = Fx(rem_cols[base:top], FixedPointFormat(0, 2 * (top - base)), rem_bounds[base:top])
            dwin = self.resize(dv, window.fmt)
            trial, ge = self.propagate(self.add(window, self.negate(dwin)), keep_carry=True)
            kept = self.select(ge, trial, window)
            rem_cols[base:top] = kept.cols
            rem_bounds[base:top] = kept.bounds
            qcols_bits[t] = ge
        cols, bounds = [], []
        for i in range(nb):
            terms = [(qcols_bits[2 * i + s], 1 << s) for s in (0, 1) if 2 * i + s in qcols_bits]
            if terms:
                cols.append(self.eng.lin(terms))
                bounds.append(sum(k for _, k in terms))
            else:
                cols.append(self.eng.const(0, batch))
                bounds.append(0)
        return Fx(cols, fmt, bounds)

    # -- reductions --------------------------------------------------------

    def sum_many(self, xs: list[Fx]) -> Fx:
        """Sum of clean values of one format (modulo the format width).

        Each round adds as many values per group as the carry headroom
        allows and cleans all groups with one batched propagation.
        """
        if not xs:
            raise ValueError("sum of an empty list")
        level = list(xs)
        while len(level) > 1:
            per = max(2, (PBS_SPACE - 1) // max(max(x.bounds) for x in level))
            groups = [level[i:i + per] for i in range(0, len(level), per)]
            sums = []
            for g in groups:
                acc = g[0]
                for v in g[1:]:
                    acc = self.add(acc, v)
                sums.append(acc)
            level = self.propagate_many(sums)
        return level[0] if level[0].is_clean else self.propagate(level[0])

    def cond_negate(self, x: Fx, flag) -> Fx:
        """Two's complement ``-x`` where the bit column ``flag`` is 1, ``x`` elsewhere (clean ``x``)."""
        eng = self.eng
        if not x.is_clean:
            raise ContractError("conditional negation needs a clean value")
        flip = lut2(lambda f, v: v ^ (3 * (f & 1)))
        res = eng.pbs([(eng.lin([(flag, 4), (c, 1)]), flip) for c in x.cols], stage="cond_negate")
        out = Fx(res, x.fmt, [3] * len(res))
        out.cols[0] = eng.add(out.cols[0], flag)
        out.bounds[0] = 4
        return self.propagate(out)

    # -- miscellaneous -----------------------------------------------------

    def nonzero(self, cols: list, bounds: list[int]):
        """Bit column ``sum(cols) != 0`` for clean blocks whose bound sum stays in the PBS space."""
        if sum(bounds) >= PBS_SPACE:
            raise ContractError("too many blocks for one nonzero test")
        (res,) = self.eng.pbs([(self.eng.lin([(c, 1) for c in cols]), NONZERO)], stage="flag")
        return res

    def abs_sign(self, x: Fx) -> tuple[Fx, object]:
        """(|x| as unsigned of the same width, sign bit) for a clean two's-complement ``x``."""
        eng = self.eng
        if not x.is_clean:
            raise ContractError("absolute value needs a clean value")
        (s,) = eng.pbs([(x.cols[-1], lut(lambda v: (v >> 1) & 1))], stage="sign")
        flip = lut2(lambda f, v: v ^ (3 * (f & 1)))
        res = eng.pbs([(eng.lin([(s, 4), (c, 1)]), flip) for c in x.cols], stage="abs")
        mag = Fx(res, FixedPointFormat(x.fmt.integer_bits, x.fmt.fractional_bits, False), [3] * len(res))
        mag.cols[0] = eng.add(mag.cols[0], s)
        mag.bounds[0] = 4
        return self.propagate(mag), s


# ---------------------------------------------------------------------------
# Client-side helpers and serialization
# ---------------------------------------------------------------------------


def mirror_value(values, fmt: FixedPointFormat) -> Fx:
    """Plaintext mirror value of reals ``values``."""
    raw = fmt.encode(np.atleast_1d(values))
    return Fx([d for d in fmt.to_blocks(raw)], fmt)


def mirror_decode(x: Fx) -> np.ndarray:
    return x.fmt.decode(x.fmt.from_blocks(np.stack(x.cols)))


def mirror_raw(x: Fx) -> np.ndarray:
    return x.fmt.from_blocks(np.stack(x.cols))


def encrypt_value(values, fmt: FixedPointFormat, keys: KeyBundle, rng: np.random.Generator) -> Fx:
    """Encrypt reals as clean level-1 blocks."""
    from .torus import encrypt_lwe

    raw = fmt.encode(np.atleast_1d(values))
    cols = [encrypt_lwe(encode(d, 64 - BLOCK_DELTA_LOG), keys.lwe1, keys.params.sigma_l1, rng).data
            for d in fmt.to_blocks(raw)]
    return Fx(cols, fmt)


def decrypt_blocks(x: Fx, keys: KeyBundle) -> np.ndarray:
    """Block plaintexts (nb, B) of an encrypted value."""
    from .torus import LweCiphertext, decrypt_lwe

    return np.stack([decrypt_lwe(LweCiphertext(c, 1), keys.lwe1, 64 - BLOCK_DELTA_LOG) for c in x.cols])


def decrypt_value(x: Fx, keys: KeyBundle) -> np.ndarray:
    return x.fmt.decode(x.fmt.from_blocks(decrypt_blocks(x, keys)))


def write_fx(f, x: Fx) -> None:
    """Format header then the blocks, LSB first, as one TGR1 record."""
    write_record(f, "fixed_point", 1, np.stack(x.cols), extra=(
        x.fmt.integer_bits, x.fmt.fractional_bits, int(x.fmt.signed), x.fmt.block_count, *x.bounds))


def read_fx(f) -> Fx:
    kind, level, extra, words = read_record(f)
    if kind != "fixed_point":
        raise ValueError(f"expected a fixed-point record, got {kind}")
    ib, fb, signed, nb = extra[:4]
    fmt = FixedPointFormat(ib, fb, bool(signed))
    bounds = list(extra[4:4 + nb])
    return Fx(list(words), fmt, bounds)


def fx_to_bytes(x: Fx) -> bytes:
    buf = io.BytesIO()
    write_fx(buf, x)
    return buf.getvalue()


def fx_from_bytes(data: bytes) -> Fx:
    return read_fx(io.BytesIO(data))


def save_fx_list(path, xs: list[Fx]) -> None:
    """Write values back to back, one record each."""
    with open(path, "wb") as f:
        for x in xs:
            write_fx(f, x)


def load_fx_list(path) -> list[Fx]:
    out = []
    with open(path, "rb") as f:
        while f.peek(1):
            out.append(read_fx(f))
    return out
