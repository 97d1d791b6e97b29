"""Time the compiled and pure-Python RK4 batch kernels on the benchmark network.

    python benchmarks/bench_kernels.py [--samples 256] [--steps 2000]

Reports nanoseconds per sample-step for each backend and checks that both
produce the same final states.
"""
import argparse
import time
from pathlib import Path

import numpy as np

from matchsync import kernels
from matchsync.equilibrium import solve_equilibrium
from matchsync.model import load_network

HERE = Path(__file__).resolve().parent


def time_backend(model, Z, u, steps, backend, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = kernels.run_batch(model, Z, u, 1e-5, steps, steps, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, out[3]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=256)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)

    model = load_network(HERE / "two_converter.json")
    eq = solve_equilibrium(model)
    rng = np.random.default_rng(0)
    Z = np.repeat(eq.z_star[None], args.samples, 0)
    Z[:, model.sl_gamma] += rng.uniform(-1.5, 1.5, (args.samples, model.n))

    work = args.samples * args.steps
    results = {}
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    for b in backends:
        secs, zf = time_backend(model, Z, eq.u_star, args.steps, b, args.repeats)
        results[b] = zf
        print(f"{b:>7}: {secs:8.3f} s  {1e9 * secs / work:8.1f} ns per sample-step")
    if len(results) == 2:
        diff = np.max(np.abs(results["python"] - results["cython"]))
        print(f"max |python - cython| = {diff:.2e}")
    else:
        print("compiled kernel not available; only the fallback was timed")


if __name__ == "__main__":
    main()
