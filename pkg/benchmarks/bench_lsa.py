"""Compare LSA backends on random Gram matrices.

    python3 benchmarks/bench_lsa.py [--sizes 64,128,256,512] [--repeats 5]

scipy's solver is timed as a reference when it is installed.
"""

import argparse
import time

import numpy as np

from permalign.lsa import available_backends, solve_lsa


def gram(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2 * n))
    y = x[rng.permutation(n)] + 0.5 * rng.normal(size=(n, 2 * n))
    return x @ y.T


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="64,128,256,512")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    try:
        from scipy.optimize import linear_sum_assignment
    except ImportError:
        linear_sum_assignment = None
    backends = available_backends()
    header = ["n"] + backends + (["scipy"] if linear_sum_assignment else []) + ["agree"]
    print("  ".join(f"{h:>10}" for h in header))
    for n in (int(s) for s in args.sizes.split(",")):
        g = gram(n, n)
        row = [f"{n:>10d}"]
        objs = []
        for b in backends:
            row.append(f"{best_of(lambda: solve_lsa(g, backend=b), args.repeats):>9.4f}s")
            objs.append(solve_lsa(g, backend=b)[1])
        if linear_sum_assignment:
            row.append(f"{best_of(lambda: linear_sum_assignment(g, maximize=True), args.repeats):>9.4f}s")
            r, c = linear_sum_assignment(g, maximize=True)
            objs.append(float(g[r, c].sum()))
        agree = all(abs(o - objs[0]) <= 1e-9 * abs(objs[0]) for o in objs)
        row.append(f"{str(agree):>10}")
        print("  ".join(row))


if __name__ == "__main__":
    main()
