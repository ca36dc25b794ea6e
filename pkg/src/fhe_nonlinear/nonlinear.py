"""Lookup-plus-refinement evaluation of exp(-x), GELU and 1/sqrt(x).

Each function reads a high-precision table entry with a WoP-PBS lookup on
the leading bits of its input and corrects the remaining low bits with a
first-order term computed in fixed point.  All evaluators are written
against :class:`~fhe_nonlinear.fixed_point.Arith`, so the encrypted path and
the plaintext mirror run the same block-level program.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .fixed_point import EXP_FORMAT, GELU_FORMAT, VARIANCE_FORMAT, Arith, FixedPointFormat, Fx, lut, schedule_mul
from .torus import ConfigurationError
from .wop import LookupTable

INVSQRT_FORMAT = FixedPointFormat(10, 24)
HALF_BLOCK = 2  # half of one 2-bit block: rounding offset before dropping a block


@dataclass(frozen=True)
class InvSqrtRegion:
    """Input interval ``[2^lo_exp, 2^hi_exp)`` and the number of correction blocks below its window."""

    lo_exp: int
    hi_exp: int
    delta_blocks: int


DEFAULT_REGIONS = (
    InvSqrtRegion(-16, -12, 0),
    InvSqrtRegion(-12, -6, 0),
    InvSqrtRegion(-6, 2, 1),
    InvSqrtRegion(2, 12, 2),
)


@dataclass(frozen=True)
class FunctionEvalConfig:
    """Bit splits and table precisions of the three evaluators.

    exp: the (12, 20) input is cut into ``exp_split = (high, mid, low)``
    bits; the high part only flushes the result to zero.  GELU: ``t`` is the
    top ``gelu_t_bits`` of ``|x|`` below the pass-through threshold and
    ``gelu_delta_bits`` remain for the linear correction.  InvSqrt: one
    ``invsqrt_t_bits``-wide window per region.
    """

    exp_split: tuple[int, int, int] = (6, 20, 6)
    exp_out_frac: int = 22
    gelu_t_bits: int = 20
    gelu_t_int_bits: int = 4
    gelu_delta_bits: int = 4
    gelu_threshold: float = 16.0
    gelu_value_bits: tuple[int, int] = (10, 22)
    gelu_slope_bits: tuple[int, int] = (2, 10)
    invsqrt_t_bits: int = 20
    invsqrt_regions: tuple[InvSqrtRegion, ...] = DEFAULT_REGIONS
    invsqrt_out: tuple[int, int] = (10, 24)
    invsqrt_slope_shift_blocks: int = 4

    def __post_init__(self):
        if sum(self.exp_split) != EXP_FORMAT.total_bits:
            raise ConfigurationError("exp split widths must cover the 32-bit input")
        if any(w % 2 for w in self.exp_split):
            raise ConfigurationError("exp split widths must be whole blocks")
        if self.gelu_t_bits + self.gelu_delta_bits != GELU_FORMAT.fractional_bits + self.gelu_t_int_bits:
            raise ConfigurationError("GELU t and delta must cover |x| below the threshold")
        if self.gelu_threshold != 2.0 ** self.gelu_t_int_bits:
            raise ConfigurationError("GELU threshold must equal the range of t")
        regs = self.invsqrt_regions
        if not regs or any(a.hi_exp != b.lo_exp for a, b in zip(regs, regs[1:])):
            raise ConfigurationError("InvSqrt regions must be contiguous")
        if (regs[0].lo_exp, regs[-1].hi_exp) != (-16, 12):
            raise ConfigurationError("InvSqrt regions must cover [2^-16, 2^12)")
        frac = VARIANCE_FORMAT.fractional_bits
        for r in regs:
            if (r.lo_exp + frac) % 2 or (r.hi_exp + frac) % 2 or r.delta_blocks < 0:
                raise ConfigurationError("InvSqrt region bounds must fall on block boundaries")
            if self.invsqrt_window_start(r) - r.delta_blocks < 0:
                raise ConfigurationError("InvSqrt correction reaches below the input")

    def invsqrt_window_start(self, region: InvSqrtRegion) -> int:
        """Lowest input block of the region's ``t`` window (window ends at the region top)."""
        top = (region.hi_exp + VARIANCE_FORMAT.fractional_bits) // 2
        return top - self.invsqrt_t_bits // 2

    @property
    def invsqrt_delta_blocks(self) -> int:
        return max(r.delta_blocks for r in self.invsqrt_regions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["invsqrt_regions"] = [asdict(r) for r in self.invsqrt_regions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionEvalConfig":
        d = dict(d)
        if "invsqrt_regions" in d:
            d["invsqrt_regions"] = tuple(InvSqrtRegion(**r) for r in d["invsqrt_regions"])
        for k in ("exp_split", "gelu_value_bits", "gelu_slope_bits", "invsqrt_out"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> str:
        """Stable hash of the configuration, stored next to generated tables."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Table generation
# ---------------------------------------------------------------------------


def gelu_ref(x):
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def gelu_slope_ref(x):
    """d/dx GELU(x) = Phi(x) + x phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return ndtr(x) + x * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def _fixed(values, frac_bits: int, bits: int) -> np.ndarray:
    """Round-half-even ``values * 2^frac_bits`` clipped into ``bits`` bits."""
    raw = np.rint(np.asarray(values, dtype=np.float64) * 2.0 ** frac_bits)
    return np.clip(raw, 0, 2.0 ** bits - 1).astype(np.int64)


@dataclass(frozen=True)
class GeneratedLut:
    """A lookup table plus the description of how its entries were produced."""

    name: str
    table: LookupTable
    domain: str
    outputs: tuple[str, ...]
    config_digest: str
    rounding: str = "half-even"

    def metadata(self) -> dict:
        return {
            "function": self.name,
            "domain": self.domain,
            "outputs": list(self.outputs),
            "rounding": self.rounding,
            "config_digest": self.config_digest,
            "input_bits": self.table.input_bits,
            "output_bits": list(self.table.output_bits),
        }

    def save(self, path) -> None:
        """Write the table record and a ``.json`` metadata sidecar."""
        path = Path(path)
        self.table.save(path)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(self.metadata(), indent=2))

    @classmethod
    def load(cls, path) -> "GeneratedLut":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        return cls(meta["function"], LookupTable.load(path), meta["domain"], tuple(meta["outputs"]),
                   meta["config_digest"], meta["rounding"])


@dataclass(frozen=True)
class FunctionLuts:
    exp: GeneratedLut
    gelu: GeneratedLut
    invsqrt: GeneratedLut


def exp_table(cfg: FunctionEvalConfig) -> GeneratedLut:
    _, mid, low = cfg.exp_split
    step = 2.0 ** -(EXP_FORMAT.fractional_bits - low)
    frac = cfg.exp_out_frac
    table = LookupTable.from_function(mid, frac + 1, lambda i: _fixed(np.exp(-i * step), frac, frac + 1))
    return GeneratedLut("exp_neg", table, f"x1 = index * 2^-{EXP_FORMAT.fractional_bits - low}",
                        (f"exp(-x1) * 2^{frac}",), cfg.digest())


def gelu_table(cfg: FunctionEvalConfig) -> GeneratedLut:
    t_frac = cfg.gelu_t_bits - cfg.gelu_t_int_bits
    vi, vf = cfg.gelu_value_bits
    si, sf = cfg.gelu_slope_bits

    def fn(i):
        t = i * 2.0 ** -t_frac
        return _fixed(gelu_ref(t), vf, vi + vf), _fixed(gelu_slope_ref(t), sf, si + sf)

    table = LookupTable.from_function(cfg.gelu_t_bits, (vi + vf, si + sf), fn)
    return GeneratedLut("gelu", table, f"t = index * 2^-{t_frac}",
                        (f"GELU(t) * 2^{vf}", f"G(t) * 2^{sf}"), cfg.digest())


def invsqrt_slope_scale(cfg: FunctionEvalConfig, region: InvSqrtRegion) -> int:
    """Exponent e with slope entry = round(G(t) * 2^e) for the region."""
    s = cfg.invsqrt_window_start(region)
    w = cfg.invsqrt_delta_blocks
    return 2 * (s - w) - VARIANCE_FORMAT.fractional_bits + cfg.invsqrt_out[1] + 2 * cfg.invsqrt_slope_shift_blocks


def invsqrt_table(cfg: FunctionEvalConfig) -> GeneratedLut:
    """Combined table indexed by ``t + (region << t_bits)``.

    Entry 0 is ``F(t) = 1/sqrt(t)`` at ``invsqrt_out`` precision, entry 1 the
    scaled slope ``G(t) = 1/(2 t sqrt(t))`` for regions that use a
    correction (zero elsewhere).  Indices below a region's lower bound are
    never reached by valid inputs and hold clipped values.
    """
    tb = cfg.invsqrt_t_bits
    oi, of = cfg.invsqrt_out
    frac = VARIANCE_FORMAT.fractional_bits
    idx = np.arange(1 << tb, dtype=np.float64)
    f_parts, g_parts, g_max = [], [], 0.0
    for r in cfg.invsqrt_regions:
        s = cfg.invsqrt_window_start(r)
        t = np.maximum(idx, 1.0) * 2.0 ** (2 * s - frac)
        valid = t >= 2.0 ** r.lo_exp
        f = 1.0 / np.sqrt(t)
        g = 0.5 / (t * np.sqrt(t)) * 2.0 ** invsqrt_slope_scale(cfg, r) if r.delta_blocks else np.zeros_like(t)
        g = np.where(valid, g, 0.0)
        g_max = max(g_max, float(np.rint(g.max())))
        f_parts.append(_fixed(f, of, oi + of))
        g_parts.append(g)
    g_bits = max(2, int(g_max).bit_length() + (int(g_max).bit_length() % 2))
    gv = np.concatenate([_fixed(g, 0, g_bits) for g in g_parts])
    table = LookupTable(tb + 2, (oi + of, g_bits), np.stack([np.concatenate(f_parts), gv]).astype(np.uint64))
    return GeneratedLut("inv_sqrt", table, f"region << {tb} | t, t = index * 2^(2*start - {frac})",
                        (f"F(t) * 2^{of}", "G(t) * 2^slope_scale(region)"), cfg.digest())


def build_luts(cfg: FunctionEvalConfig = FunctionEvalConfig()) -> FunctionLuts:
    """Deterministic tables for the three functions from double-precision references."""
    if len(cfg.invsqrt_regions) != 4:
        raise ConfigurationError("the region selector is two bits wide: exactly four regions")
    return FunctionLuts(exp_table(cfg), gelu_table(cfg), invsqrt_table(cfg))


# ---------------------------------------------------------------------------
# Evaluators
# ---------------------------------------------------------------------------


def _blocks(x: Fx, lo: int, hi: int) -> tuple[list, list[int]]:
    return x.cols[lo:hi], x.bounds[lo:hi]


class FunctionEvaluator:
    """exp(-x), GELU and 1/sqrt(x) over an :class:`Arith` instance."""

    def __init__(self, arith: Arith, cfg: FunctionEvalConfig = FunctionEvalConfig(),
                 luts: FunctionLuts | None = None):
        self.ar = arith
        self.cfg = cfg
        self.luts = luts or build_luts(cfg)

    # -- exp(-x) -----------------------------------------------------------

    def exp_neg(self, x: Fx) -> Fx:
        """exp(-x) for unsigned (12, 20) ``x``, returned in (12, 20).

        The middle bits index a table of exp(-x1); the low bits x2 < 2^-14
        apply exp(-x2) ~ 1 - x2 as y1 - y1 * x2; any nonzero high bit
        flushes the result to zero.
        """
        ar, eng, cfg = self.ar, self.ar.eng, self.cfg
        if x.fmt.block_count != EXP_FORMAT.block_count or x.fmt.signed:
            raise ConfigurationError("exp_neg expects an unsigned (12, 20) input")
        _, mid, low = cfg.exp_split
        b_low, b_mid = low // 2, mid // 2
        batch = ar.batch(x)
        hi_cols, hi_bounds = _blocks(x, b_low + b_mid, x.fmt.block_count)
        flag = ar.nonzero(hi_cols, hi_bounds)
        table = self.luts.exp.table
        mid_cols, _ = _blocks(x, b_low, b_low + b_mid)
        y1_cols = eng.lookup(mid_cols, [2] * b_mid, table, stage="exp_lookup")
        frac = cfg.exp_out_frac
        y_fmt = FixedPointFormat(2 * len(y1_cols) - frac, frac)
        y1 = Fx(y1_cols, y_fmt, [3] * len(y1_cols))
        x2 = Fx(list(x.cols[:b_low]), FixedPointFormat(0, low), list(x.bounds[:b_low]))
        # x2 counts units of 2^-20, so dropping 20 bits keeps the y1 scale
        shift = EXP_FORMAT.fractional_bits // 2
        plan = schedule_mul(y_fmt, x2.fmt, (shift, shift + len(y1_cols)), y1.bounds, x2.bounds)
        prod = ar.execute_mul(y1, x2, plan, y_fmt)
        r = ar.sub(y1, prod)
        drop = (frac - EXP_FORMAT.fractional_bits) // 2
        if drop:
            r = ar.propagate(ar.add_raw(r, HALF_BLOCK * 4 ** (drop - 1)))
        out = ar.resize(r, EXP_FORMAT, shift_blocks=drop)
        return ar.mask(flag, out, keep_when=0)

    # -- GELU --------------------------------------------------------------

    def gelu(self, x: Fx) -> Fx:
        """GELU for signed (12, 20) ``x``, returned in signed (12, 20).

        ``|x|`` at or above the threshold passes through unchanged.  Below it
        the joint table gives GELU(t) and G(t) for the leading bits ``t`` and
        the remaining bits ``delta`` add G(t) * delta.  Negative inputs use
        GELU(-a) = GELU(a) - a.
        """
        ar, eng, cfg = self.ar, self.ar.eng, self.cfg
        if x.fmt.block_count != GELU_FORMAT.block_count or not x.fmt.signed:
            raise ConfigurationError("gelu expects a signed (12, 20) input")
        mag, sign = ar.abs_sign(x)
        fmt = GELU_FORMAT
        db = cfg.gelu_delta_bits // 2
        tb = cfg.gelu_t_bits // 2
        big = ar.nonzero(*_blocks(mag, db + tb, fmt.block_count))
        table = self.luts.gelu.table
        vi, vf = cfg.gelu_value_bits
        si, sf = cfg.gelu_slope_bits
        outs = eng.lookup(mag.cols[db:db + tb], [2] * tb, table, stage="gelu_lookup")
        nv = (vi + vf) // 2
        val = Fx(outs[:nv], FixedPointFormat(vi, vf), [3] * nv)
        slope = Fx(outs[nv:], FixedPointFormat(si, sf), [3] * (len(outs) - nv))
        delta = Fx(mag.cols[:db], FixedPointFormat(0, 2 * db), mag.bounds[:db])
        # slope * delta carries sf + fractional_bits fractional bits; align to vf
        lo = (sf + fmt.fractional_bits - vf) // 2
        hi = slope.fmt.block_count + db
        plan = schedule_mul(slope.fmt, delta.fmt, (lo, hi), slope.bounds, delta.bounds)
        corr = ar.execute_mul(slope, delta, plan)
        corr = ar.resize(corr, val.fmt)
        res = ar.add(val, corr)
        drop = (vf - fmt.fractional_bits) // 2
        if drop:
            res = ar.add_raw(res, HALF_BLOCK * 4 ** (drop - 1))
        res = ar.propagate(res)
        pos = ar.resize(res, FixedPointFormat(fmt.integer_bits, fmt.fractional_bits), shift_blocks=drop)
        pos = ar.select(big, mag, pos)
        neg_part = ar.mask(sign, mag)
        return ar.sub(pos, neg_part).with_format(fmt)

    # -- 1/sqrt(x) ---------------------------------------------------------

    def inv_sqrt(self, x: Fx) -> Fx:
        """1/sqrt(x) for unsigned (12, 40) ``x`` in [2^-16, 2^12), returned in (10, 24).

        Range flags on the high blocks pick one of four regions.  The
        region's 20-bit window ``t`` and the region number index one combined
        table holding F(t) and a scaled slope; the blocks below the window
        correct the result by F(t) - G(t) * delta.
        """
        ar, eng, cfg = self.ar, self.ar.eng, self.cfg
        if x.fmt != VARIANCE_FORMAT:
            raise ConfigurationError("inv_sqrt expects an unsigned (12, 40) input")
        regs = cfg.invsqrt_regions
        frac = VARIANCE_FORMAT.fractional_bits
        nb = x.fmt.block_count
        starts = [(r.lo_exp + frac) // 2 for r in regs] + [nb]
        # h_r: some bit set inside region r (r >= 1); g_r: x >= 2^lo_exp(r)
        h_jobs = []
        for k in range(1, len(regs)):
            cols, bounds = _blocks(x, starts[k], starts[k + 1])
            if sum(bounds) >= 16:
                raise ConfigurationError("region flag spans too many blocks")
            h_jobs.append((eng.lin([(c, 1) for c in cols]), lut(lambda v: int(v != 0))))
        h = eng.pbs(h_jobs, stage="invsqrt_flags")
        g_jobs = [(eng.lin([(c, 1) for c in h[k:]]), lut(lambda v: int(v != 0))) for k in range(len(h))]
        g = eng.pbs(g_jobs, stage="invsqrt_flags")
        region = eng.lin([(c, 1) for c in g])
        one = eng.const(1, ar.batch(x))
        onehot = [eng.lin([(one, 1), (g[0], -1)])]
        onehot += [eng.lin([(g[k], 1), (g[k + 1], -1)]) for k in range(len(g) - 1)]
        onehot.append(g[-1])
        tb = cfg.invsqrt_t_bits // 2
        wm = cfg.invsqrt_delta_blocks
        window = [cfg.invsqrt_window_start(r) for r in regs]
        items = []
        for r, reg in enumerate(regs):
            s = window[r]
            span = list(range(s - wm, s + tb))
            cols = [x.cols[i] if i >= s - reg.delta_blocks else eng.const(0, ar.batch(x)) for i in span]
            bounds = [x.bounds[i] if i >= s - reg.delta_blocks else 0 for i in span]
            items.append((onehot[r], Fx(cols, FixedPointFormat(0, 2 * len(span)), bounds)))
        masked = ar.mask_many(items)
        sel_cols = [eng.lin([(m.cols[i], 1) for m in masked]) for i in range(wm + tb)]
        # exactly one region survives the masks, so every block stays below 4
        t_cols = sel_cols[wm:]
        outs = eng.lookup(t_cols + [region], [2] * tb + [2], self.luts.invsqrt.table, stage="invsqrt_lookup")
        oi, of = cfg.invsqrt_out
        nf = (oi + of) // 2
        out_fmt = FixedPointFormat(oi, of)
        f = Fx(outs[:nf], out_fmt, [3] * nf)
        if wm == 0:
            return f
        slope = Fx(outs[nf:], FixedPointFormat(0, 2 * (len(outs) - nf)), [3] * (len(outs) - nf))
        delta = Fx(sel_cols[:wm], FixedPointFormat(0, 2 * wm), [3] * wm)
        shift = cfg.invsqrt_slope_shift_blocks
        hi = slope.fmt.block_count + wm
        if hi <= shift:
            return f
        plan = schedule_mul(slope.fmt, delta.fmt, (shift, hi), slope.bounds, delta.bounds)
        corr = ar.resize(ar.execute_mul(slope, delta, plan), out_fmt)
        return ar.sub(f, corr)
