"""Compare the compiled expression-evaluation kernels with the pure-Python
(numpy) fallback on representative workloads.

Run:  python3 benchmarks/bench_kernels.py [--points 200] [--repeat 200]

The hot paths during search are `evaluate` (candidate scoring, row-validity
filtering) and `mse_and_grad` (the inner loop of BFGS refinement: one call per
line-search trial).  Both are benchmarked on a spread of expression sizes.
"""

import argparse
import time

import numpy as np

from mmsr.exprs import parse_infix
from mmsr.kernels import programs, pybackend

try:
    from mmsr.kernels import _evalcore as compiled
except ImportError:
    compiled = None

CASES = [
    ("linear", "1.57 + 2.43 * x1", 1),
    ("sine-const", "sin(1.5 * x1) * 0.8 + 0.25", 1),
    ("nested", "sin((x1 * x2) + cos(x1 - 0.5)) / (x2 * x2 + 1.3)", 2),
    ("deep", "sqrt(exp(sin(x1 * 0.7) + cos(x2 * 1.3)) + 2.0) * (x1 - x2) + log(x1 * x1 + 1.1)", 2),
]


def _bench(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'case':<12} {'steps':>5} {'kind':>12} {'python':>10} {'compiled':>10} {'speedup':>8}")
    for name, infix, d in CASES:
        expr = parse_infix(infix)
        prog = programs.flatten(expr)
        consts = np.array(expr.constants(), dtype=np.float64)
        X = rng.uniform(0.5, 2.0, (args.points, d))
        y0, ok = pybackend.evaluate(prog, consts, X)
        assert ok.all(), name
        y = y0 + rng.normal(0, 0.01, args.points)

        t_py_ev = _bench(lambda: pybackend.evaluate(prog, consts, X), args.repeat)
        t_py_gr = _bench(lambda: pybackend.mse_and_grad(prog, consts, X, y), args.repeat)
        if compiled is not None:
            t_c_ev = _bench(lambda: compiled.evaluate(
                prog.ops, prog.arg1, prog.arg2, consts, X), args.repeat)
            t_c_gr = _bench(lambda: compiled.mse_and_grad(
                prog.ops, prog.arg1, prog.arg2, consts, X, y), args.repeat)
            yc, okc = compiled.evaluate(prog.ops, prog.arg1, prog.arg2, consts, X)
            assert okc.all() and np.allclose(yc, y0, rtol=1e-12), "backend mismatch"
        else:
            t_c_ev = t_c_gr = float("nan")
        for kind, tp, tc in (("evaluate", t_py_ev, t_c_ev),
                             ("mse_and_grad", t_py_gr, t_c_gr)):
            ratio = tp / tc if tc == tc and tc > 0 else float("nan")
            print(f"{name:<12} {prog.n_steps:>5} {kind:>12} {tp*1e6:>9.1f}u "
                  f"{tc*1e6:>9.1f}u {ratio:>7.1f}x")
    if compiled is None:
        print("\ncompiled backend unavailable; showing python numbers only")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
