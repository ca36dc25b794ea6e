"""Batch scheduling of bootstraps: chunk splitting, a worker pool and run statistics.

Upstream operators hand one stage's worth of independent PBS requests to a
:class:`Scheduler`.  The scheduler cuts the request rows into chunks sized
by :func:`split_plan`, runs the chunks one after another and spreads the
rows of each chunk over a thread pool.  Every row is computed the same way
wherever it lands, so results never depend on the policy.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .boot import keyswitch_raw, pbs_raw, test_polynomial
from .poly_fft import DEFAULT_FFT, FftConfig
from .torus import ConfigurationError, KeyBundle, LweCiphertext


@dataclass(frozen=True)
class BatchPolicy:
    """Chunk bounds and parallelism of the scheduler.

    ``batching_enabled=False`` runs every request on its own (chunks of
    one), the unbatched baseline of the ablation harness.
    """

    min_batch: int = 192
    max_batch: int = 320
    split_enabled: bool = True
    batching_enabled: bool = True
    worker_count: int = 1

    def __post_init__(self):
        if not 1 <= self.min_batch <= self.max_batch:
            raise ConfigurationError("batch bounds must satisfy 1 <= min_batch <= max_batch")
        if self.worker_count < 1:
            raise ConfigurationError("worker_count must be at least 1")

    def to_dict(self) -> dict:
        return {
            "min_batch": self.min_batch,
            "max_batch": self.max_batch,
            "split_enabled": self.split_enabled,
            "batching_enabled": self.batching_enabled,
            "worker_count": self.worker_count,
        }


def split_plan(total: int, policy: BatchPolicy = BatchPolicy()) -> list[int]:
    """Chunk sizes for ``total`` requests.

    With splitting on, totals above ``max_batch`` are cut into
    ``ceil(total / max_batch)`` chunks whose sizes differ by at most one.
    """
    if total < 1:
        raise ValueError("total must be at least 1")
    if not policy.batching_enabled:
        return [1] * total
    if not policy.split_enabled or total <= policy.max_batch:
        return [total]
    count = math.ceil(total / policy.max_batch)
    q, r = divmod(total, count)
    return [q + 1] * r + [q] * (count - r)


def _even_slices(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n))
    q, r = divmod(n, parts)
    out, start = [], 0
    for i in range(parts):
        stop = start + q + (1 if i < r else 0)
        out.append((start, stop))
        start = stop
    return out


@dataclass
class StageStats:
    pbs: int = 0
    keyswitch: int = 0
    cmux: int = 0
    seconds: float = 0.0
    chunks: list[int] = field(default_factory=list)


class RunStats:
    """Per-stage PBS, key-switch and CMux counts plus chunk sizes and wall time."""

    def __init__(self):
        self.stages: dict[str, StageStats] = defaultdict(StageStats)

    def record(self, stage: str, *, pbs: int = 0, keyswitch: int = 0, cmux: int = 0,
               seconds: float = 0.0, chunks: list[int] | None = None) -> None:
        s = self.stages[stage]
        s.pbs += pbs
        s.keyswitch += keyswitch
        s.cmux += cmux
        s.seconds += seconds
        if chunks:
            s.chunks.extend(chunks)

    @property
    def total_pbs(self) -> int:
        return sum(s.pbs for s in self.stages.values())

    def to_dict(self, max_chunks: int = 64) -> dict:
        return {
            name: {
                "pbs": s.pbs,
                "keyswitch": s.keyswitch,
                "cmux": s.cmux,
                "seconds": round(s.seconds, 4),
                "chunk_count": len(s.chunks),
                "chunk_sizes": s.chunks[:max_chunks],
            }
            for name, s in self.stages.items()
        }


class Scheduler:
    """Runs PBS batches for one key bundle under a :class:`BatchPolicy`."""

    def __init__(self, keys: KeyBundle, policy: BatchPolicy = BatchPolicy(), cfg: FftConfig = DEFAULT_FFT):
        self.keys = keys
        self.policy = policy
        self.cfg = cfg
        self.stats = RunStats()
        self._pool = ThreadPoolExecutor(policy.worker_count) if policy.worker_count > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def map_rows(self, fn, n: int) -> list:
        """Call ``fn(start, stop)`` on balanced row slices across the pool, in order."""
        slices = _even_slices(n, self.policy.worker_count)
        if self._pool is None or len(slices) == 1:
            return [fn(a, b) for a, b in slices]
        return list(self._pool.map(lambda ab: fn(*ab), slices))

    def _run_chunked(self, n: int, fn, stage: str) -> np.ndarray:
        plan = split_plan(n, self.policy)
        out = []
        start = 0
        for size in plan:
            base = start
            parts = self.map_rows(lambda a, b: fn(base + a, base + b), size)
            out.extend(parts)
            start += size
        self.stats.record(stage, chunks=plan)
        return np.concatenate(out, axis=0)

    def pbs_level0(self, lwe0: np.ndarray, test_polys: np.ndarray, lut_index: np.ndarray,
                   out_level: int, stage: str = "pbs") -> np.ndarray:
        """Bootstrap level-0 rows with the GPBS key (``out_level=1``) or level-2 key (``2``)."""
        bsk = {1: self.keys.bk_gpbs, 2: self.keys.bk_l2}[out_level]
        n = lwe0.shape[0]
        if n == 0:
            return np.empty((0, self.keys.params.lwe_dim(out_level) + 1), dtype=np.uint64)
        t0 = time.perf_counter()
        lut_index = np.asarray(lut_index, dtype=np.int64)
        res = self._run_chunked(
            n, lambda a, b: pbs_raw(lwe0[a:b], test_polys, lut_index[a:b], bsk, self.cfg), stage)
        self.stats.record(stage, pbs=n, seconds=time.perf_counter() - t0)
        return res

    def pbs(self, data: np.ndarray, test_polys: np.ndarray, lut_index: np.ndarray,
            stage: str = "pbs") -> np.ndarray:
        """Standard level-1 PBS: key switch to level 0, then blind-rotate with the GPBS key."""
        n = data.shape[0]
        if n == 0:
            return np.empty((0, self.keys.params.n1 + 1), dtype=np.uint64)
        t0 = time.perf_counter()
        lut_index = np.asarray(lut_index, dtype=np.int64)
        keys, cfg = self.keys, self.cfg

        def run(a, b):
            small = keyswitch_raw(data[a:b], keys.ksk_gpbs)
            return pbs_raw(small, test_polys, lut_index[a:b], keys.bk_gpbs, cfg)

        res = self._run_chunked(n, run, stage)
        self.stats.record(stage, pbs=n, keyswitch=n, seconds=time.perf_counter() - t0)
        return res


@dataclass(frozen=True)
class PbsRequest:
    """One PBS: ``ct`` at level 1 (standard PBS) or level 0 (bootstrap to level 2)."""

    ct: LweCiphertext
    table: np.ndarray  # torus words, one per padded message
    level: int = 1


def submit_batch(requests: list[PbsRequest], policy: BatchPolicy, keys: KeyBundle,
                 cfg: FftConfig = DEFAULT_FFT, scheduler: Scheduler | None = None) -> list[LweCiphertext]:
    """Run independent PBS requests; results come back in request order.

    Requests of different output levels are grouped and run as separate
    batches.
    """
    own = scheduler is None
    sched = scheduler or Scheduler(keys, policy, cfg)
    try:
        results: list[LweCiphertext | None] = [None] * len(requests)
        for level in (1, 2):
            idx = [i for i, r in enumerate(requests) if r.level == level]
            if not idx:
                continue
            n = keys.params.poly_degree(level)
            polys, lut_of = [], {}
            lut_index = np.empty(len(idx), dtype=np.int64)
            for pos, i in enumerate(idx):
                key = np.asarray(requests[i].table, dtype=np.uint64).tobytes()
                if key not in lut_of:
                    lut_of[key] = len(polys)
                    polys.append(test_polynomial(requests[i].table, n))
                lut_index[pos] = lut_of[key]
            data = np.stack([requests[i].ct.data for i in idx])
            tp = np.stack(polys)
            if level == 1:
                out = sched.pbs(data, tp, lut_index, stage="submit")
            else:
                out = sched.pbs_level0(data, tp, lut_index, 2, stage="submit")
            for pos, i in enumerate(idx):
                results[i] = LweCiphertext(out[pos], level)
        bad = [i for i, r in enumerate(requests) if r.level not in (1, 2)]
        if bad:
            raise ValueError(f"unsupported PBS level in request {bad[0]}")
        return results
    finally:
        if own:
            sched.close()
