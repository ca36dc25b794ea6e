"""Command-line entry point: keys, encryption, evaluation, verification and the ablation benchmark.

Structured output is JSON on stdout (or in the ``--out`` report); binary
files use the TGR1 record format.  Keys and lookup tables are cached under
``$TIGER_HOME`` (default ``~/.cache/tiger``).
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .batch import BatchPolicy, Scheduler
from .fixed_point import (
    Arith,
    CryptoEngine,
    Fx,
    decrypt_blocks,
    decrypt_value,
    encrypt_value,
    load_fx_list,
    save_fx_list,
)
from .layers import LayerNormParams
from .mirror import INPUT_FORMATS, OPS, VECTOR_OPS, apply_op, mirror_eval, sample_inputs, split_columns
from .nonlinear import FunctionEvalConfig, FunctionEvaluator, FunctionLuts, GeneratedLut, build_luts
from .poly_fft import FftConfig
from .torus import KeyBundle, keygen, load_keys, load_preset, save_keys, with_fft

BENCH_DIMS = (4, 8, 16, 64, 128, 768)


@dataclass
class RunConfig:
    """Everything a command needs besides its own arguments."""

    preset: str = "toy"
    seed: int = 0
    policy: BatchPolicy = field(default_factory=BatchPolicy)
    fft: FftConfig = field(default_factory=FftConfig)
    eval_cfg: FunctionEvalConfig = field(default_factory=FunctionEvalConfig)
    home: Path = field(default_factory=lambda: tiger_home())

    def __post_init__(self):
        self.home = Path(self.home)
        load_preset(self.preset)  # unknown names and missing files fail here

    @property
    def key_dir(self) -> Path:
        name = Path(self.preset).stem
        return self.home / "keys" / f"{name}-{self.seed}"


def tiger_home() -> Path:
    return Path(os.environ.get("TIGER_HOME", Path.home() / ".cache" / "tiger"))


# ---------------------------------------------------------------------------
# Library-level helpers (also used by the tests)
# ---------------------------------------------------------------------------


def get_keys(cfg: RunConfig, key_dir: Path | None = None) -> KeyBundle:
    """Load keys from ``key_dir`` (default: the cache), generating and caching them if absent."""
    d = Path(key_dir) if key_dir else cfg.key_dir
    if (d / "params.json").exists():
        return load_keys(d, cfg.fft)
    keys = keygen(load_preset(cfg.preset), cfg.seed, cfg.fft)
    save_keys(keys, d)
    return keys


def get_luts(cfg: RunConfig) -> FunctionLuts:
    """Function tables for ``cfg.eval_cfg``, cached by configuration digest."""
    d = cfg.home / "luts" / cfg.eval_cfg.digest()
    names = ("exp", "gelu", "invsqrt")
    if all((d / f"{n}.tgr").exists() for n in names):
        return FunctionLuts(*(GeneratedLut.load(d / f"{n}.tgr") for n in names))
    luts = build_luts(cfg.eval_cfg)
    d.mkdir(parents=True, exist_ok=True)
    for n in names:
        getattr(luts, n).save(d / f"{n}.tgr")
    return luts


def encrypt_inputs(values, op: str, keys: KeyBundle, rng: np.random.Generator) -> list[Fx]:
    """One encrypted value per vector element (a single value for scalar functions)."""
    return [encrypt_value(c, INPUT_FORMATS[op], keys, rng) for c in split_columns(values, op)]


def decrypt_outputs(xs: list[Fx], keys: KeyBundle, op: str) -> np.ndarray:
    dec = np.stack([decrypt_value(x, keys) for x in xs], axis=1)
    return dec if op in VECTOR_OPS else dec[:, 0]


@dataclass
class EncryptedRun:
    outputs: list[Fx]
    seconds: float
    stats: dict
    total_pbs: int


def run_encrypted(op: str, xs: list[Fx], keys: KeyBundle, luts: FunctionLuts, policy: BatchPolicy = BatchPolicy(),
                  fft: FftConfig | None = None, eval_cfg: FunctionEvalConfig = FunctionEvalConfig(),
                  ln_params: LayerNormParams | None = None) -> EncryptedRun:
    """Evaluate ``op`` on encrypted values and collect per-stage statistics."""
    if op not in OPS:
        raise ValueError(f"unknown operation {op!r}")
    with Scheduler(keys, policy, fft or FftConfig()) as sched:
        fe = FunctionEvaluator(Arith(CryptoEngine(keys, sched)), eval_cfg, luts)
        t0 = time.perf_counter()
        outs = apply_op(fe, op, xs, ln_params)
        seconds = time.perf_counter() - t0
        return EncryptedRun(outs, seconds, sched.stats.to_dict(), sched.stats.total_pbs)


def verify_op(op: str, values: np.ndarray, keys: KeyBundle, luts: FunctionLuts, rng: np.random.Generator,
              policy: BatchPolicy = BatchPolicy(), eval_cfg: FunctionEvalConfig = FunctionEvalConfig(),
              ln_params: LayerNormParams | None = None) -> dict:
    """Encrypted result against the mirror, block by block, for each input (row)."""
    run = run_encrypted(op, encrypt_inputs(values, op, keys, rng), keys, luts, policy,
                        eval_cfg=eval_cfg, ln_params=ln_params)
    mirror = mirror_eval(op, values, luts, ln_params, eval_cfg)
    same = np.ones(np.asarray(values).shape[0], dtype=bool)
    for enc, mir in zip(run.outputs, mirror.values):
        same &= (decrypt_blocks(enc, keys) == np.stack(mir.cols)).all(axis=0)
    return {
        "op": op,
        "trials": int(same.size),
        "matches": int(same.sum()),
        "mismatched_inputs": np.asarray(values)[~same].tolist(),
        "seconds": round(run.seconds, 3),
        "pbs": run.total_pbs,
    }


def _ln_params(path: str | None, n: int) -> LayerNormParams | None:
    if path is None:
        return None
    d = json.loads(Path(path).read_text())
    p = LayerNormParams(d["gamma"], d["beta"])
    if p.n != n:
        raise ValueError(f"parameters have {p.n} features, inputs have {n}")
    return p


def _bench_inputs(op: str, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if op in VECTOR_OPS:
        return sample_inputs(op, rng, 1, dim)
    return sample_inputs(op, rng, dim)


def bench_grid(karatsuba=(False, True), split=(False, True), radix=(2, 4)) -> list[tuple[bool, bool, int]]:
    return list(itertools.product(karatsuba, split, radix))


def run_bench(op: str, dim: int, keys: KeyBundle, luts: FunctionLuts, grid, base_policy: BatchPolicy = BatchPolicy(),
              seed: int = 0, eval_cfg: FunctionEvalConfig = FunctionEvalConfig()) -> dict:
    """Time ``op`` under each (karatsuba, split, radix) configuration on the same ciphertexts.

    Raises ``AssertionError`` if any configuration decrypts to different blocks.
    """
    values = _bench_inputs(op, dim, seed)
    xs = encrypt_inputs(values, op, keys, np.random.default_rng(seed + 1))
    rows, reference = [], None
    for k, s, r in grid:
        fft = FftConfig(radix=r, use_karatsuba=k)
        run = run_encrypted(op, xs, with_fft(keys, fft), luts, replace(base_policy, split_enabled=s), fft, eval_cfg)
        blocks = [decrypt_blocks(o, keys) for o in run.outputs]
        if reference is None:
            reference = blocks
        identical = all(np.array_equal(a, b) for a, b in zip(reference, blocks))
        rows.append({"karatsuba": k, "split": s, "radix": r, "seconds": round(run.seconds, 3),
                     "pbs": run.total_pbs, "identical": identical})
    base = rows[0]["seconds"] or 1.0
    for row in rows:
        row["ratio"] = round(row["seconds"] / base, 3)
    report = {"op": op, "dim": dim, "rows": rows, "bit_identical": all(r["identical"] for r in rows)}
    assert report["bit_identical"], "ablation configurations disagree on decrypted outputs"
    return report


def format_table(rows: list[dict]) -> str:
    head = f"{'K':>3} {'S':>3} {'R':>3} {'seconds':>10} {'ratio':>7} {'pbs':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{'K' if r['karatsuba'] else '-':>3} {'S' if r['split'] else '-':>3} {r['radix']:>3} "
                     f"{r['seconds']:>10.3f} {r['ratio']:>7.3f} {r['pbs']:>9}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _emit(report: dict, out: str | None = None) -> None:
    text = json.dumps(report, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_keygen(cfg: RunConfig, args) -> int:
    d = Path(args.out) if args.out else cfg.key_dir
    keys = keygen(load_preset(cfg.preset), cfg.seed, cfg.fft)
    sizes = save_keys(keys, d)
    p = keys.params
    _emit({"directory": str(d), "preset": p.name, "dims": {"n0": p.n0, "N1": p.n1_poly, "N2": p.n2_poly},
           "bytes": sizes})
    return 0


def cmd_encrypt(cfg: RunConfig, args) -> int:
    keys = get_keys(cfg, args.keys)
    values = np.asarray(json.loads(Path(args.input).read_text()), dtype=np.float64)
    rng = np.random.default_rng(None if args.encrypt_seed is None else args.encrypt_seed)
    xs = encrypt_inputs(values, args.op, keys, rng)
    out = args.out or "inputs.tgr"
    save_fx_list(out, xs)
    _emit({"op": args.op, "file": out, "values": len(xs), "batch": int(values.shape[0])})
    return 0


def cmd_decrypt(cfg: RunConfig, args) -> int:
    keys = get_keys(cfg, args.keys)
    xs = load_fx_list(args.input)
    dec = np.stack([decrypt_value(x, keys) for x in xs], axis=1)
    values = dec[:, 0] if dec.shape[1] == 1 else dec
    _emit({"values": values.tolist()}, args.out)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    keys = get_keys(cfg, args.keys)
    xs = load_fx_list(args.input)
    fmt = INPUT_FORMATS[args.op]
    if any(x.fmt != fmt for x in xs):
        raise ValueError(f"{args.op} inputs must be in format {fmt}")
    ln = _ln_params(args.params, len(xs)) if args.op == "layernorm" else None
    run = run_encrypted(args.op, xs, keys, get_luts(cfg), cfg.policy, cfg.fft, cfg.eval_cfg, ln)
    out = args.out or "outputs.tgr"
    save_fx_list(out, run.outputs)
    report = {"op": args.op, "preset": keys.params.name, "output": out, "seconds": round(run.seconds, 3),
              "total_pbs": run.total_pbs, "policy": cfg.policy.to_dict(), "stages": run.stats}
    _emit(report, args.report or f"{out}.json")
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    if args.trials == 0:
        warnings.warn("zero trials requested; nothing was checked")
        _emit({"op": args.op, "trials": 0, "matches": 0, "passed": True})
        return 0
    keys = get_keys(cfg, args.keys)
    rng = np.random.default_rng(cfg.seed)
    values = sample_inputs(args.op, rng, args.trials, args.dim)
    ln = LayerNormParams.identity(values.shape[1]) if args.op == "layernorm" else None
    report = verify_op(args.op, values, keys, get_luts(cfg), rng, cfg.policy, cfg.eval_cfg, ln)
    report["passed"] = report["matches"] == report["trials"]
    _emit(report, args.out)
    return 0 if report["passed"] else 1


def cmd_bench(cfg: RunConfig, args) -> int:
    keys = get_keys(cfg, args.keys)
    grid = bench_grid(
        karatsuba=(False,) if args.no_karatsuba else (False, True),
        split=(False,) if args.no_split else (False, True),
        radix=(args.fft_radix,) if args.fft_radix else (2, 4),
    )
    report = run_bench(args.op, args.dim or 8, keys, get_luts(cfg), grid, cfg.policy, cfg.seed, cfg.eval_cfg)
    print(format_table(report["rows"]), file=sys.stderr)
    _emit(report, args.out)
    return 0


COMMANDS = {
    "keygen": cmd_keygen,
    "encrypt": cmd_encrypt,
    "decrypt": cmd_decrypt,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="toy", help="paper, toy, or a parameter JSON file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--batch-min", type=int, default=192)
    common.add_argument("--batch-max", type=int, default=320)
    common.add_argument("--no-split", action="store_true", help="never split PBS batches")
    common.add_argument("--no-batch", action="store_true", help="run every PBS on its own")
    common.add_argument("--fft-radix", type=int, choices=(2, 4))
    common.add_argument("--no-karatsuba", action="store_true")
    common.add_argument("--keys", help="key directory (default: cached under TIGER_HOME)")
    common.add_argument("--out")

    parser = argparse.ArgumentParser(prog="fhe-nonlinear", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("keygen", parents=[common], help="generate and write a key bundle")
    p = sub.add_parser("encrypt", parents=[common], help="encrypt a JSON list of values or vectors")
    p.add_argument("--op", choices=OPS, required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--encrypt-seed", type=int)
    p = sub.add_parser("decrypt", parents=[common], help="decrypt a ciphertext file to JSON")
    p.add_argument("--input", required=True)
    p = sub.add_parser("eval", parents=[common], help="evaluate an operation on encrypted inputs")
    p.add_argument("--op", choices=OPS, required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--params", help="LayerNorm gamma/beta JSON file")
    p.add_argument("--report", help="run report path (default: <out>.json)")
    p = sub.add_parser("verify", parents=[common], help="encrypted-vs-mirror check on random inputs")
    p.add_argument("--op", choices=OPS, required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--dim", type=int, help="vector length for softmax and layernorm")
    p = sub.add_parser("bench", parents=[common], help="ablation grid over Karatsuba, splitting and FFT radix")
    p.add_argument("--op", choices=OPS, default="softmax")
    p.add_argument("--dim", type=int, help=f"vector length or input count (default 8; benchmark sizes {BENCH_DIMS})")
    return parser


def config_from_args(args) -> RunConfig:
    policy = BatchPolicy(min_batch=args.batch_min, max_batch=args.batch_max, split_enabled=not args.no_split,
                         batching_enabled=not args.no_batch, worker_count=args.workers)
    fft = FftConfig(radix=args.fft_radix or 4, use_karatsuba=not args.no_karatsuba)
    return RunConfig(preset=args.preset, seed=args.seed, policy=policy, fft=fft)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = config_from_args(args)
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
