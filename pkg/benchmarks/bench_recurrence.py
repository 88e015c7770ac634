"""Time the compiled recurrence against the numpy fallback (forward + checkpointed backward).

    python3 benchmarks/bench_recurrence.py --batch 32 --lengths 20,64,256 --repeat 5
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from fastweights.kernels import BACKENDS
from fastweights.layer import backward_sequence, forward_sequence


def time_once(backend, phik, v, phiq, beta, rule, norm, final, gy):
    t0 = time.perf_counter()
    _, rec = forward_sequence(phik, v, phiq, beta, rule=rule, normalization=norm, final=final, backend=backend)
    backward_sequence(rec, gy)
    return time.perf_counter() - t0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lengths", default="20,64,256")
    p.add_argument("--d-dot", type=int, default=32)
    p.add_argument("--d-value", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    args = p.parse_args(argv)

    if "cython" not in BACKENDS:
        print("compiled kernel not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    dtype = np.dtype(args.dtype)
    print(f"{'rule':>6} {'norm':>10} {'final':>6} {'L':>5} " + " ".join(f"{b:>10}" for b in sorted(BACKENDS))
          + ("    speedup" if len(BACKENDS) > 1 else ""))
    for L in (int(x) for x in args.lengths.split(",")):
        phik = rng.uniform(0, 1, (args.batch, L, args.d_dot)).astype(dtype)
        v = rng.standard_normal((args.batch, L, args.d_value)).astype(dtype)
        beta = rng.uniform(0, 1, (args.batch, L)).astype(dtype)
        for rule, norm, final in (("sum", "attention", False), ("delta", "sum", True), ("delta", "attention", False)):
            phiq = phik if not final else phik[:, :1].copy()
            gy = np.ones((args.batch, phiq.shape[1], args.d_value), dtype)
            best = {}
            for name in sorted(BACKENDS):
                time_once(name, phik, v, phiq, beta, rule, norm, final, gy)  # warm-up
                best[name] = min(time_once(name, phik, v, phiq, beta, rule, norm, final, gy)
                                 for _ in range(args.repeat))
            line = f"{rule:>6} {norm:>10} {final!s:>6} {L:>5} " + " ".join(
                f"{best[n] * 1e3:8.2f}ms" for n in sorted(BACKENDS))
            if "cython" in best:
                line += f"  {best['python'] / best['cython']:8.1f}x"
            print(line)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
