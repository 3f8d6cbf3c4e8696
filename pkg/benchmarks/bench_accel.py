"""Compare the numba-compiled and pure-numpy hot paths.

Batch evaluation is timed in-process (both implementations are always
importable).  The MPC rollout has no vectorized twin, so its two variants
are timed in subprocesses with and without ``ALKIAX_DISABLE_NUMBA=1``.

    python3 benchmarks/bench_accel.py [--epsilon 1e-2] [--points 200000]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from alkiax import ApproxConfig, CstrMpcOracle, SincosOracle, approximate
from alkiax._hot import evaluate_points_compiled, evaluate_points_numpy
from alkiax.evaluator import evaluate_batch

MPC_SNIPPET = """
import time, numpy as np
from alkiax import CstrMpcOracle
o = CstrMpcOracle()
pts = np.random.default_rng(1).uniform(-0.2, 0.2, ({count}, 2))
o.query_many(pts[:2])
t = time.perf_counter()
o.query_many(pts)
print((time.perf_counter() - t) / len(pts) * 1e3)
"""


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def mpc_ms_per_query(disable, count):
    env = dict(os.environ, ALKIAX_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", MPC_SNIPPET.format(count=count)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--epsilon", type=float, default=1e-2)
    parser.add_argument("--points", type=int, default=200_000)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--mpc-queries", type=int, default=50)
    args = parser.parse_args()

    model, report = approximate(SincosOracle(), None, ApproxConfig(args.epsilon))
    pts = np.random.default_rng(0).random((args.points, 2))
    evaluate_batch(model, pts[:10], use_numba=True)  # compile outside the timing

    compiled = best_of(lambda: evaluate_batch(model, pts, use_numba=True), args.repeats)
    vectorized = best_of(lambda: evaluate_batch(model, pts, use_numba=False), args.repeats)
    same = np.array_equal(evaluate_batch(model, pts, use_numba=True).values,
                          evaluate_batch(model, pts, use_numba=False).values)
    close = np.allclose(evaluate_batch(model, pts, use_numba=True).values,
                        evaluate_batch(model, pts, use_numba=False).values, rtol=0, atol=1e-12)
    print(f"model: eps={args.epsilon:g}, {report.approximated_count} leaves, max depth {report.max_depth_reached}")
    print(f"batch evaluate, {args.points} points ({evaluate_points_compiled.__name__} vs {evaluate_points_numpy.__name__})")
    print(f"  numba  {compiled / args.points * 1e9:10.1f} ns/point")
    print(f"  numpy  {vectorized / args.points * 1e9:10.1f} ns/point  ({vectorized / compiled:.1f}x)")
    print(f"  outputs bit-identical: {same}, within 1e-12: {close}")

    numba_ms = mpc_ms_per_query(False, args.mpc_queries)
    python_ms = mpc_ms_per_query(True, max(2, args.mpc_queries // 10))
    print(f"CSTR MPC oracle ({CstrMpcOracle().cfg.starts} starts per query)")
    print(f"  numba   {numba_ms:10.2f} ms/query")
    print(f"  python  {python_ms:10.2f} ms/query  ({python_ms / numba_ms:.0f}x)")


if __name__ == "__main__":
    main()
