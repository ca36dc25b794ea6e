"""Plaintext mirror runs, error sweeps and the analytic noise tracker.

The mirror runs the same block-level programs as the encrypted path on a
:class:`~fhe_nonlinear.fixed_point.MirrorEngine`, so its results are the
bit-exact reference for decryptions.  :func:`error_sweep` compares mirror
results with double-precision references, and :class:`NoiseModel` tracks
ciphertext noise variances with the usual TFHE variance formulas.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .fixed_point import (
    EXP_FORMAT,
    GELU_FORMAT,
    LAYERNORM_FORMAT,
    SOFTMAX_FORMAT,
    VARIANCE_FORMAT,
    Arith,
    FixedPointFormat,
    Fx,
    MirrorEngine,
    mirror_decode,
    mirror_value,
)
from .layers import LayerNormParams, layernorm, layernorm_ref, softmax, softmax_ref
from .nonlinear import FunctionEvalConfig, FunctionEvaluator, FunctionLuts, build_luts, gelu_ref
from .torus import ParameterSet

OPS = ("exp", "gelu", "invsqrt", "softmax", "layernorm")
INPUT_FORMATS = {
    "exp": EXP_FORMAT,
    "gelu": GELU_FORMAT,
    "invsqrt": VARIANCE_FORMAT,
    "softmax": SOFTMAX_FORMAT,
    "layernorm": LAYERNORM_FORMAT,
}
VECTOR_OPS = ("softmax", "layernorm")
FAILURE_THRESHOLD = 2.0 ** -32


# ---------------------------------------------------------------------------
# Running operators
# ---------------------------------------------------------------------------


def apply_op(fe: FunctionEvaluator, op: str, xs: list[Fx], ln_params: LayerNormParams | None = None) -> list[Fx]:
    """Run ``op`` on engine values: one value for scalar functions, one per element for layers."""
    if op == "exp":
        return [fe.exp_neg(xs[0])]
    if op == "gelu":
        return [fe.gelu(xs[0])]
    if op == "invsqrt":
        return [fe.inv_sqrt(xs[0])]
    if op == "softmax":
        return softmax(fe, xs)
    if op == "layernorm":
        return layernorm(fe, xs, ln_params or LayerNormParams.identity(len(xs)))
    raise ValueError(f"unknown operation {op!r}")


def split_columns(values: np.ndarray, op: str) -> list[np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    if op in VECTOR_OPS:
        if values.ndim != 2:
            raise ValueError(f"{op} expects a (batch, n) array")
        return [values[:, i] for i in range(values.shape[1])]
    return [values.reshape(-1)]


def encode_inputs(values: np.ndarray, op: str) -> list[Fx]:
    fmt = INPUT_FORMATS[op]
    return [mirror_value(c, fmt) for c in split_columns(values, op)]


@dataclass
class MirrorRun:
    """Decoded outputs ``(batch,)`` or ``(batch, n)``, the output values and the PBS count."""

    outputs: np.ndarray
    values: list[Fx]
    pbs_count: int


def mirror_eval(op: str, values: np.ndarray, luts: FunctionLuts | None = None,
                ln_params: LayerNormParams | None = None, cfg: FunctionEvalConfig = FunctionEvalConfig()) -> MirrorRun:
    """Evaluate ``op`` in plaintext with the same block program as the encrypted path."""
    if op not in OPS:
        raise ValueError(f"unknown operation {op!r}")
    eng = MirrorEngine()
    fe = FunctionEvaluator(Arith(eng), cfg, luts)
    outs = apply_op(fe, op, encode_inputs(values, op), ln_params)
    dec = np.stack([mirror_decode(o) for o in outs], axis=1)
    if op not in VECTOR_OPS:
        dec = dec[:, 0]
    return MirrorRun(dec, outs, eng.pbs_count)


def reference(op: str, values: np.ndarray, ln_params: LayerNormParams | None = None) -> np.ndarray:
    """Double-precision reference on the format-quantized inputs."""
    fmt = INPUT_FORMATS[op]
    x = fmt.decode(fmt.encode(np.asarray(values, dtype=np.float64)))
    if op == "exp":
        return np.exp(-x)
    if op == "gelu":
        return gelu_ref(x)
    if op == "invsqrt":
        return 1.0 / np.sqrt(x)
    if op == "softmax":
        return softmax_ref(x)
    if op == "layernorm":
        return layernorm_ref(x, ln_params or LayerNormParams.identity(x.shape[-1]))
    raise ValueError(f"unknown operation {op!r}")


def sample_inputs(op: str, rng: np.random.Generator, count: int, n: int | None = None) -> np.ndarray:
    """Random inputs inside each operation's tested domain."""
    if op == "exp":
        return rng.uniform(0, 64, count)
    if op == "gelu":
        return rng.uniform(-16, 16, count)
    if op == "invsqrt":
        return 2.0 ** rng.uniform(-16, 12, count)
    if op == "softmax":
        return rng.uniform(-8, 8, (count, n or 8))
    if op == "layernorm":
        return rng.uniform(-4, 4, (count, n or 16))
    raise ValueError(f"unknown operation {op!r}")


# ---------------------------------------------------------------------------
# Error sweeps
# ---------------------------------------------------------------------------


SWEEP_DOMAINS = {
    "exp_neg": [("uniform", 0.0, 64.0)],
    "gelu": [("uniform", -16.0, 16.0)],
    "inv_sqrt": [("log2-uniform", -16.0, -12.0), ("log2-uniform", -12.0, -6.0),
                 ("log2-uniform", -6.0, 2.0), ("log2-uniform", 2.0, 12.0)],
}
SWEEP_OPS = {"exp_neg": "exp", "gelu": "gelu", "inv_sqrt": "invsqrt"}


@dataclass
class SweepReport:
    function: str
    grid: dict
    points: int
    max_abs_error: float
    max_rel_error: float
    argmax_abs: float
    argmax_rel: float
    segments: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _grid(kind: str, lo: float, hi: float, points: int, rng: np.random.Generator, ulp: float) -> np.ndarray:
    """Seeded points on ``[lo, hi)``; the edges are ``lo`` and the last input-format step below ``hi``."""
    u = rng.random(points)
    if kind == "uniform":
        x = lo + (hi - lo) * u
        edges = np.array([lo, hi - ulp])
    else:
        x = 2.0 ** (lo + (hi - lo) * u)
        edges = np.array([2.0 ** lo, 2.0 ** hi - ulp])
    return np.concatenate([edges, x[: points - 2]])


def error_sweep(function: str, points: int = 1_000_000, seed: int = 0, chunk: int = 100_000,
                luts: FunctionLuts | None = None, cfg: FunctionEvalConfig = FunctionEvalConfig()) -> SweepReport:
    """Max absolute and relative mirror error against the double reference over a seeded grid.

    ``points`` are split evenly over the function's domain segments (one
    segment per InvSqrt region); both endpoints of every segment are
    included.  The report is a pure function of its arguments.
    """
    if function not in SWEEP_DOMAINS:
        raise ValueError(f"no sweep domain for {function!r}")
    op = SWEEP_OPS[function]
    luts = luts or build_luts(cfg)
    rng = np.random.default_rng(seed)
    segs = SWEEP_DOMAINS[function]
    per = max(2, points // len(segs))
    best = {"abs": (-1.0, 0.0), "rel": (-1.0, 0.0)}
    seg_reports = []
    for kind, lo, hi in segs:
        xs = _grid(kind, lo, hi, per, rng, 2.0 ** -INPUT_FORMATS[op].fractional_bits)
        s_abs, s_rel = 0.0, 0.0
        for start in range(0, xs.size, chunk):
            x = xs[start:start + chunk]
            got = mirror_eval(op, x, luts, cfg=cfg).outputs
            ref = reference(op, x)
            err = np.abs(got - ref)
            rel = err / np.maximum(np.abs(ref), np.finfo(float).tiny)
            i, j = int(err.argmax()), int(rel.argmax())
            s_abs, s_rel = max(s_abs, float(err[i])), max(s_rel, float(rel[j]))
            if err[i] > best["abs"][0]:
                best["abs"] = (float(err[i]), float(x[i]))
            if rel[j] > best["rel"][0]:
                best["rel"] = (float(rel[j]), float(x[j]))
        seg_reports.append({"kind": kind, "lo": lo, "hi": hi, "points": int(xs.size),
                            "max_abs_error": s_abs, "max_rel_error": s_rel})
    return SweepReport(
        function=function,
        grid={"segments": [list(s) for s in segs], "points_per_segment": per, "seed": seed},
        points=per * len(segs),
        max_abs_error=best["abs"][0],
        max_rel_error=best["rel"][0],
        argmax_abs=best["abs"][1],
        argmax_rel=best["rel"][1],
        segments=seg_reports,
    )


# ---------------------------------------------------------------------------
# Noise tracking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseEstimate:
    """Noise variance in torus units (the torus is [0, 1)) and the steps that produced it."""

    variance: float
    provenance: tuple[str, ...] = ()

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def then(self, variance: float, step: str) -> "NoiseEstimate":
        return NoiseEstimate(variance, self.provenance + (step,))


def _digit_var(base_log: int) -> float:
    """Mean square of balanced digits in [-B/2, B/2)."""
    b = 2.0 ** base_log
    return (b * b + 2) / 12.0


def _round_var(base_log: int, length: int) -> float:
    """Variance of the gadget rounding error, uniform over one unit of the last digit."""
    return 2.0 ** (-2 * base_log * length) / 12.0


KEY_MEAN_SQUARE = 0.5  # binary secret keys
FFT_ROUNDOFF = 12.0


@dataclass(frozen=True)
class TrackedPoint:
    step: str
    estimate: NoiseEstimate
    failure_probability: float | None = None

    @property
    def flagged(self) -> bool:
        return self.failure_probability is not None and self.failure_probability > FAILURE_THRESHOLD


class NoiseModel:
    """Variance propagation for the operations of one parameter set.

    External products accumulate digit-times-key products in float64 FFTs.
    Their roundoff is modelled as ``FFT_ROUNDOFF * (k+1) l N^2 E[d^2] / 12 *
    2^-106``; the constant was fitted to measured products against noiseless
    GGSW ciphertexts for N from 256 to 2048 and rounded up.  ``fft_factor``
    scales that term.
    """

    def __init__(self, params: ParameterSet, fft_factor: float = 1.0):
        self.p = params
        self.fft_factor = fft_factor

    def fresh(self, level: int) -> NoiseEstimate:
        return NoiseEstimate(self.p.sigma(level) ** 2, (f"fresh_l{level}",))

    @staticmethod
    def linear(terms: list[tuple[NoiseEstimate, int]]) -> NoiseEstimate:
        """Noise of sum_i k_i * c_i for independent ciphertexts."""
        var = sum(k * k * e.variance for e, k in terms)
        prov = tuple(s for e, _ in terms for s in e.provenance) + ("linear",)
        return NoiseEstimate(var, prov)

    def keyswitch_var(self, key: str) -> float:
        g = getattr(self.p, key)
        n_in = {"ksk_gpbs": self.p.n1, "ksk_cmux": self.p.n1, "ksk_l2_l1": self.p.n2, "pfks": self.p.n2}[key]
        return n_in * (g.length * g.sigma ** 2 * _digit_var(g.base_log)
                       + KEY_MEAN_SQUARE * _round_var(g.base_log, g.length))

    def keyswitch(self, e: NoiseEstimate, key: str) -> NoiseEstimate:
        return e.then(e.variance + self.keyswitch_var(key), key)

    def modulus_switch_var(self, n_poly: int) -> float:
        """Rounding n0 mask words and the body to multiples of 1/(2N)."""
        return (self.p.n0 * KEY_MEAN_SQUARE + 1) / (12.0 * (2 * n_poly) ** 2)

    def fft_var(self, n_poly: int, base_log: int, length: int) -> float:
        k = self.p.k
        mag = (k + 1) * length * n_poly * n_poly * _digit_var(base_log) / 12.0
        return self.fft_factor * FFT_ROUNDOFF * mag * 2.0 ** -106

    def external_product_var(self, n_poly: int, base_log: int, length: int, ggsw_var: float,
                             message_square: float = 1.0) -> float:
        """Noise added by GGSW(m) times a GLWE; ``ggsw_var`` is the per-coefficient row variance.

        The gadget rounding error is multiplied by the GGSW message, so its
        term scales with ``message_square = E[m^2]``.
        """
        k = self.p.k
        key_term = (k + 1) * length * n_poly * _digit_var(base_log) * ggsw_var
        round_term = (1 + k * n_poly * KEY_MEAN_SQUARE) * _round_var(base_log, length) * message_square
        return key_term + round_term + self.fft_var(n_poly, base_log, length)

    def pbs_output(self, key: str) -> NoiseEstimate:
        """Blind rotation with ``bk_gpbs`` (level 1) or ``bk_l2`` (level 2) and sample extraction."""
        g = getattr(self.p, key)
        n = self.p.n1_poly if key == "bk_gpbs" else self.p.n2_poly
        var = self.p.n0 * self.external_product_var(n, g.base_log, g.length, g.sigma ** 2, KEY_MEAN_SQUARE)
        return NoiseEstimate(var, (key,))

    @staticmethod
    def failure_probability(variance: float, margin: float) -> float:
        """P(|noise| >= margin) for centred Gaussian noise."""
        if variance <= 0:
            return 0.0
        return float(erfc(margin / math.sqrt(2 * variance)))

    def pbs_failure(self, e: NoiseEstimate, n_poly: int, margin_log: int) -> float:
        """Failure probability of a PBS whose level-0 input carries noise ``e``; margin 2^-margin_log."""
        return self.failure_probability(e.variance + self.modulus_switch_var(n_poly), 2.0 ** -margin_log)

    def circuit_bootstrap_rows(self) -> tuple[NoiseEstimate, NoiseEstimate]:
        """(key row, body row) noise of a GGSW built by a level-2 sign bootstrap and the functional key switch.

        Variances are per coefficient, averaged over the row.  Key rows
        multiply the scalar bootstrapped noise by a binary key polynomial;
        body rows carry it in the constant coefficient only.
        """
        lvl2 = self.pbs_output("bk_l2")
        pf = self.keyswitch_var("pfks")
        key_row = lvl2.then(lvl2.variance * KEY_MEAN_SQUARE + pf, "pfks_key_row")
        body_row = lvl2.then(lvl2.variance / self.p.n1_poly + pf, "pfks_body_row")
        return key_row, body_row

    def circuit_bootstrap_row(self) -> NoiseEstimate:
        """Mean row noise of a circuit-bootstrapped GGSW (rows enter an external product equally)."""
        key_row, body_row = self.circuit_bootstrap_rows()
        return key_row.then((key_row.variance + body_row.variance) / 2, "row_mean")

    def cmux_var(self) -> float:
        """Noise added by one CMux driven by a circuit-bootstrapped selector."""
        g = self.p.bk_cmux
        return self.external_product_var(self.p.n1_poly, g.base_log, g.length, self.circuit_bootstrap_row().variance)

    def vertical_pack(self, input_bits: int) -> NoiseEstimate:
        """CMux tree plus blind rotation over ``input_bits`` circuit-bootstrapped selectors."""
        row = self.circuit_bootstrap_row()
        per = self.cmux_var()
        return row.then(input_bits * per, f"vertical_pack_{input_bits}")

    def packed_extraction(self, input_bits: int, level: int = 2) -> list[NoiseEstimate]:
        """Noise at each sign decision when one ``level`` ciphertext carries all ``input_bits``.

        Bits leave least significant first.  Round ``i`` shifts the remaining
        noise up by ``2^(input_bits - 1 - i)`` and key-switches it to level
        0; the ``i`` bits already subtracted each contributed one bootstrap
        output to that noise.
        """
        bk = "bk_l2" if level == 2 else "bk_gpbs"
        e = self.fresh(level)
        back = self.pbs_output(bk).variance
        ks = self.keyswitch_var("ksk_cmux") + (self.keyswitch_var("ksk_l2_l1") if level == 2 else 0.0)
        out = []
        for i in range(input_bits):
            var = 4.0 ** (input_bits - 1 - i) * (e.variance + i * back) + ks
            out.append(e.then(var, f"extract_bit_{i}"))
        return out

    def wop_pbs(self, input_bits: int, packed: bool = True) -> list[TrackedPoint]:
        """Tracked points of a ``input_bits``-wide lookup.

        ``packed=True`` models one level-2 ciphertext holding the whole index
        without padding, whose bit extraction bounds the index width.
        ``packed=False`` models 2-bit radix blocks, where only the CMux tree
        grows.  Sign decisions have margin 1/4; the lookup output is a block
        whose decoding margin is 2^-6.
        """
        points = []
        if packed:
            steps = self.packed_extraction(input_bits)
            probs = [self.pbs_failure(e, self.p.n2_poly, 2) for e in steps]
            worst = int(np.argmax(probs))
            points.append(TrackedPoint(f"bit_extract_{input_bits}", steps[worst], probs[worst]))
        else:
            blk = self.keyswitch(self.pbs_output("bk_gpbs"), "ksk_cmux")
            shifted = NoiseEstimate(16 * blk.variance, blk.provenance + ("shift",))
            points.append(TrackedPoint("bit_extract_block", shifted, self.pbs_failure(shifted, self.p.n1_poly, 2)))
        row = self.circuit_bootstrap_row()
        points.append(TrackedPoint("circuit_bootstrap", row))
        vp = self.vertical_pack(input_bits)
        points.append(TrackedPoint("vertical_pack", vp, self.failure_probability(vp.variance, 2.0 ** -6)))
        return points


def noise_track(pipeline: str, params: ParameterSet, fft_factor: float = 1.0) -> list[TrackedPoint]:
    """Tracked noise of a named pipeline.

    ``"pbs"``: fresh level-1 block, key switch, block PBS.  ``"wop:<bits>"``:
    lookup on one packed ciphertext of ``bits`` index bits.
    ``"wop_blocks:<bits>"``: the same lookup on 2-bit radix blocks.
    Points whose failure probability exceeds 2^-32 are flagged.
    """
    m = NoiseModel(params, fft_factor)
    if pipeline == "pbs":
        fresh = m.fresh(1)
        ks = m.keyswitch(fresh, "ksk_gpbs")
        out = m.pbs_output("bk_gpbs")
        nxt = m.keyswitch(m.linear([(out, 1), (out, 1)]), "ksk_gpbs")
        return [
            TrackedPoint("fresh_l1", fresh),
            TrackedPoint("keyswitch", ks, m.pbs_failure(ks, params.n1_poly, 6)),
            TrackedPoint("pbs_output", out),
            TrackedPoint("sum_then_keyswitch", nxt, m.pbs_failure(nxt, params.n1_poly, 6)),
        ]
    kind, _, bits = pipeline.partition(":")
    if kind in ("wop", "wop_blocks") and bits.isdigit():
        return m.wop_pbs(int(bits), packed=kind == "wop")
    raise ValueError(f"unknown pipeline {pipeline!r}")


# ---------------------------------------------------------------------------
# Measured noise
# ---------------------------------------------------------------------------


def phase_error(phase: np.ndarray, expected: np.ndarray) -> np.ndarray:
    """Signed torus difference ``phase - expected`` in [-1/2, 1/2)."""
    diff = (np.asarray(phase, dtype=np.uint64) - np.asarray(expected, dtype=np.uint64)).view(np.int64)
    return diff.astype(np.float64) / 2.0 ** 64


@dataclass(frozen=True)
class NoisePoint:
    name: str
    measured_std: float
    tracked_std: float
    samples: int

    @property
    def ratio(self) -> float:
        return self.measured_std / self.tracked_std


def measure_noise_points(keys, trials: int = 1000, seed: int = 0) -> list[NoisePoint]:
    """Phase-noise standard deviations at 20 pipeline points next to the tracked estimates.

    Each point is measured over ``trials`` independent ciphertexts (GLWE
    points use every coefficient of each ciphertext).
    """
    from .boot import cmux, keyswitch, programmable_bootstrap
    from .torus import (
        GgswCiphertext,
        GlweCiphertext,
        LweCiphertext,
        encode,
        encrypt_glwe,
        encrypt_lwe,
        glwe_phase,
        lwe_phase,
    )
    from .wop import BLOCK_DELTA_LOG, LookupTable, circuit_bootstrap, extract_bits, vertical_pack

    p = keys.params
    m = NoiseModel(p)
    rng = np.random.default_rng(seed)
    points: list[NoisePoint] = []
    bits5 = 64 - BLOCK_DELTA_LOG

    def add(name, errors, est: NoiseEstimate):
        errors = np.asarray(errors).reshape(-1)
        points.append(NoisePoint(name, float(np.sqrt(np.mean(errors ** 2))), est.std, errors.size))

    def lwe_err(ct, words):
        return phase_error(lwe_phase(ct, keys.lwe_key(ct.level)), words)

    msgs = rng.integers(0, 16, trials)
    words = encode(msgs, bits5)
    fresh = {lv: encrypt_lwe(words, keys.lwe_key(lv), p.sigma(lv), rng) for lv in (0, 1, 2)}
    for lv in (0, 1, 2):
        add(f"fresh_l{lv}", lwe_err(fresh[lv], words), m.fresh(lv))
    others = [encrypt_lwe(words, keys.lwe1, p.sigma_l1, rng) for _ in range(3)]
    total = LweCiphertext(fresh[1].data + sum(o.data for o in others), 1)
    add("sum4_l1", lwe_err(total, words * np.uint64(4)), m.linear([(m.fresh(1), 1)] * 4))
    add("scale3_l1", lwe_err(LweCiphertext(fresh[1].data * np.uint64(3), 1), words * np.uint64(3)),
        m.linear([(m.fresh(1), 3)]))
    add("ks_gpbs", lwe_err(keyswitch(fresh[1], keys.ksk_gpbs), words), m.keyswitch(m.fresh(1), "ksk_gpbs"))
    add("ks_cmux", lwe_err(keyswitch(fresh[1], keys.ksk_cmux), words), m.keyswitch(m.fresh(1), "ksk_cmux"))
    add("ks_l2_l1", lwe_err(keyswitch(fresh[2], keys.ksk_l2_l1), words), m.keyswitch(m.fresh(2), "ksk_l2_l1"))

    identity = encode(np.arange(16), bits5)
    pbs1 = programmable_bootstrap(fresh[1], identity, keys, level=1)
    add("pbs_l1", lwe_err(pbs1, words), m.pbs_output("bk_gpbs"))
    pbs2 = programmable_bootstrap(keyswitch(fresh[1], keys.ksk_gpbs), identity, keys, level=2)
    add("pbs_l2", lwe_err(pbs2, words), m.pbs_output("bk_l2"))
    pbs1b = programmable_bootstrap(fresh[1], identity, keys, level=1)
    add("sum2_pbs", lwe_err(LweCiphertext(pbs1.data + pbs1b.data, 1), words * np.uint64(2)),
        m.linear([(m.pbs_output("bk_gpbs"), 1)] * 2))
    add("lin_4a_plus_b", lwe_err(LweCiphertext(pbs1.data * np.uint64(4) + pbs1b.data, 1), words * np.uint64(5)),
        m.linear([(m.pbs_output("bk_gpbs"), 4), (m.pbs_output("bk_gpbs"), 1)]))
    add("ks_gpbs_of_pbs", lwe_err(keyswitch(pbs1, keys.ksk_gpbs), words),
        m.keyswitch(m.pbs_output("bk_gpbs"), "ksk_gpbs"))
    add("pbs_of_pbs", lwe_err(programmable_bootstrap(pbs1, identity, keys, level=1), words),
        m.pbs_output("bk_gpbs"))

    # least significant extracted bit: the block noise is shifted up by 2^4
    ext = extract_bits(pbs1, 4, keys)
    lsb = (msgs & 1).astype(np.uint64) << np.uint64(63)
    shifted = NoiseEstimate(256 * m.pbs_output("bk_gpbs").variance)
    add("extracted_lsb", lwe_err(LweCiphertext(ext.bits.data[3], 0), lsb), m.keyswitch(shifted, "ksk_cmux"))

    # circuit-bootstrapped GGSW rows (first gadget level), bits from fresh level-0 encryptions
    bits = rng.integers(0, 2, min(trials, 64))
    enc_bits = encrypt_lwe(bits.astype(np.uint64) << np.uint64(63), keys.lwe0, p.sigma_l0, rng)
    ggsw = circuit_bootstrap(enc_bits, keys)
    g = p.bk_cmux
    scale = np.uint64(1 << (64 - g.base_log))
    s1 = keys.glwe1.polys[0].astype(np.uint64)
    key_row = GlweCiphertext(ggsw.data[:, 0], 1)
    body_row = GlweCiphertext(ggsw.data[:, g.length], 1)
    bu = bits.astype(np.uint64)[:, None]
    exp_key = np.uint64(0) - bu * scale * s1[None, :]
    exp_body = np.zeros((bits.size, p.n1_poly), dtype=np.uint64)
    exp_body[:, 0] = bu[:, 0] * scale
    kr, br = m.circuit_bootstrap_rows()
    add("cb_key_row", phase_error(glwe_phase(key_row, keys.glwe1), exp_key), kr)
    add("cb_body_row", phase_error(glwe_phase(body_row, keys.glwe1), exp_body), br)

    # one CMux between two noiseless GLWEs with random masks
    d0 = rng.integers(0, 2 ** 63, (bits.size, p.n1_poly), dtype=np.uint64)
    d1 = rng.integers(0, 2 ** 63, (bits.size, p.n1_poly), dtype=np.uint64)
    errs = []
    for i in range(bits.size):
        one = GgswCiphertext(ggsw.data[i], 1, g.base_log, g.length)
        c0 = encrypt_glwe(d0[i], keys.glwe1, 0.0, rng)
        c1 = encrypt_glwe(d1[i], keys.glwe1, 0.0, rng)
        sel = cmux(one, c0, c1)
        errs.append(phase_error(glwe_phase(sel, keys.glwe1), d1[i] if bits[i] else d0[i]))
    add("cmux", errs, NoiseEstimate(m.cmux_var()))

    # 8-bit vertical packing driven by circuit-bootstrapped bits, and its key switch
    vp_bits = 8
    idx = rng.integers(0, 2 ** vp_bits, min(trials, 32))
    table = LookupTable.from_function(vp_bits, 2, lambda i: (i * 7 + 3) % 4)
    sel_bits = (idx[None, :] >> np.arange(vp_bits - 1, -1, -1)[:, None]) & 1
    enc = encrypt_lwe(sel_bits.astype(np.uint64) << np.uint64(63), keys.lwe0, p.sigma_l0, rng)
    vgs = circuit_bootstrap(enc, keys)
    vp = vertical_pack(GgswCiphertext(vgs.data, 1, g.base_log, g.length), table, keys)
    want = encode(table.lookup(idx)[0].astype(np.int64), bits5)
    out = LweCiphertext(vp.data[0], 1)
    add("vertical_pack_8", lwe_err(out, want), m.vertical_pack(vp_bits))
    add("ks_gpbs_of_vp", lwe_err(keyswitch(out, keys.ksk_gpbs), want), m.keyswitch(m.vertical_pack(vp_bits), "ksk_gpbs"))
    return points
