"""Regenerate the committed mirror error sweeps in ``artifacts/``."""

import sys
import time
from pathlib import Path

from fhe_nonlinear.mirror import SWEEP_DOMAINS, error_sweep
from fhe_nonlinear.nonlinear import build_luts

POINTS = 1_000_000
SEED = 0


def main(out_dir: str = "artifacts") -> None:
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    luts = build_luts()
    for name in SWEEP_DOMAINS:
        t0 = time.perf_counter()
        rep = error_sweep(name, POINTS, seed=SEED, luts=luts)
        rep.save(out / f"sweep_{name}.json")
        print(f"{name}: {rep.points} points, max abs {rep.max_abs_error:.3e}, max rel {rep.max_rel_error:.3e}, "
              f"{time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main(*sys.argv[1:])
