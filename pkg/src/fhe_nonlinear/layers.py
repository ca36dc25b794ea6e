"""Softmax and LayerNorm over batches of encrypted (or mirrored) fixed-point vectors.

A layer input is a list of ``n`` values, one per vector element; each value
carries a batch of independent vectors.  Per-element stages are
concatenated along the batch axis so that every stage submits one PBS batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fixed_point import (
    EXP_FORMAT,
    LAYERNORM_FORMAT,
    SOFTMAX_FORMAT,
    VARIANCE_FORMAT,
    Arith,
    ContractError,
    FixedPointFormat,
    Fx,
)
from .nonlinear import FunctionEvaluator

LAYERNORM_EPS = 2.0 ** -16
SOFTMAX_QUOTIENT_BITS = SOFTMAX_FORMAT.fractional_bits + 1  # quotients lie in [0, 1]
SQUARE_INPUT_FORMAT = FixedPointFormat(6, 20)  # |x - mean| must stay below 64


@dataclass(frozen=True)
class LayerNormParams:
    """Plaintext per-feature scale ``gamma`` and shift ``beta``."""

    gamma: tuple[float, ...]
    beta: tuple[float, ...]
    eps: float = LAYERNORM_EPS

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.gamma) != len(self.beta):
            raise ValueError("gamma and beta need one entry per feature")
        if not all(math.isfinite(v) for v in self.gamma + self.beta):
            raise ValueError("gamma and beta must be finite")
        if self.eps != LAYERNORM_EPS:
            raise ValueError("eps is fixed at 2^-16")

    @property
    def n(self) -> int:
        return len(self.gamma)

    @classmethod
    def identity(cls, n: int) -> "LayerNormParams":
        return cls((1.0,) * n, (0.0,) * n)


def _check_vector(xs: list[Fx], fmt: FixedPointFormat, min_len: int) -> int:
    if len(xs) < min_len:
        raise ValueError(f"need at least {min_len} elements, got {len(xs)}")
    for x in xs:
        if x.fmt != fmt:
            raise ContractError(f"layer input must be in format {fmt}")
    return len(xs)


def softmax(fe: FunctionEvaluator, xs: list[Fx]) -> list[Fx]:
    """Softmax over the element list: max, shift, exp(-z), sum and one division per element."""
    ar = fe.ar
    n = _check_vector(xs, SOFTMAX_FORMAT, 1)
    batch = ar.batch(xs[0])
    sizes = [batch] * n
    xmax = ar.max_tree(xs)
    # x_max - x_i is non-negative and below 2^12, so it fits the unsigned exp format
    z = ar.sub(ar.concat([xmax] * n), ar.concat(xs)).with_format(EXP_FORMAT)
    e = fe.exp_neg(z)
    total = ar.sum_many(ar.split(e, sizes))
    y = ar.div(e, ar.concat([total] * n), SOFTMAX_QUOTIENT_BITS)
    return [v.with_format(SOFTMAX_FORMAT) for v in ar.split(y, sizes)]


def _wide(fmt: FixedPointFormat, n: int) -> FixedPointFormat:
    """Unsigned format holding the sum of ``n`` values of ``fmt``."""
    extra = 2 * math.ceil(math.log2(max(n, 2)) / 2)
    return FixedPointFormat(fmt.integer_bits + extra, fmt.fractional_bits)


def layernorm(fe: FunctionEvaluator, xs: list[Fx], params: LayerNormParams) -> list[Fx]:
    """LayerNorm with plaintext gamma and beta; inputs and outputs are signed (14, 20).

    Values are biased by 2^33 to make them unsigned, so the mean and the
    centered differences use unsigned arithmetic.  Centered differences
    must stay below 64 in magnitude.
    """
    ar, eng = fe.ar, fe.ar.eng
    n = _check_vector(xs, LAYERNORM_FORMAT, 2)
    if params.n != n:
        raise ValueError("parameter count does not match the vector length")
    fmt = LAYERNORM_FORMAT
    ufmt = FixedPointFormat(fmt.integer_bits, fmt.fractional_bits)
    batch = ar.batch(xs[0])
    sizes = [batch] * n
    bias = 1 << (fmt.total_bits - 1)
    u = ar.propagate(ar.add_raw(ar.concat(xs).with_format(ufmt), bias))
    us = ar.split(u, sizes)

    wfmt = _wide(ufmt, n)
    mean = ar.div_const(ar.sum_many([ar.resize(v, wfmt) for v in us]), n)
    mean = ar.resize(mean, ufmt)
    d = ar.sub(u, ar.concat([mean] * n))
    mag, sign = ar.abs_sign(d.with_format(fmt))
    mag = ar.resize(mag, SQUARE_INPUT_FORMAT)

    sq = ar.mul(mag, mag, VARIANCE_FORMAT)
    vwide = _wide(VARIANCE_FORMAT, n)
    var = ar.div_const(ar.sum_many([ar.resize(v, vwide) for v in ar.split(sq, sizes)]), n)
    var = ar.resize(var, VARIANCE_FORMAT)
    eps_raw = int(round(params.eps * 2 ** VARIANCE_FORMAT.fractional_bits))
    inv = fe.inv_sqrt(ar.propagate(ar.add_raw(var, eps_raw)))

    normed = ar.mul(mag, ar.concat([inv] * n), ufmt)
    scale = 2 ** fmt.fractional_bits
    outs = []
    for j, (v, s) in enumerate(zip(ar.split(normed, sizes), eng.split(sign, sizes))):
        g = params.gamma[j]
        scaled = ar.mul_const(v, int(round(abs(g) * scale)), ufmt, fmt.fractional_bits // 2)
        flag = eng.lin([(eng.const(1, batch), 1), (s, -1)]) if g < 0 else s
        beta_raw = int(round(params.beta[j] * scale)) % (1 << fmt.total_bits)
        outs.append(ar.add_raw(ar.cond_negate(scaled, flag), beta_raw))
    return [v.with_format(fmt) for v in ar.propagate_many(outs)]


# ---------------------------------------------------------------------------
# Double-precision references
# ---------------------------------------------------------------------------


def softmax_ref(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layernorm_ref(x: np.ndarray, params: LayerNormParams) -> np.ndarray:
    """LayerNorm along the last axis with population variance."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + params.eps) * np.asarray(params.gamma) + np.asarray(params.beta)
