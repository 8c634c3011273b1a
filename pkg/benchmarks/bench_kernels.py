#!/usr/bin/env python3
"""Compare the numpy and compiled kernel backends on the hot shapes.

Run:  python3 benchmarks/bench_kernels.py

The dispatch in drivealign.kernels follows what this benchmark shows:
batched MLP math goes to BLAS-backed numpy, per-step geometry and stepping
go to the compiled extension when available.
"""

import time

import numpy as np

from drivealign import _kernels_py

try:
    from drivealign import _speedups
except ImportError:
    _speedups = None

BACKENDS = [("numpy", _kernels_py)]
if _speedups is not None:
    BACKENDS.append(("compiled", _speedups))


def timeit(fn, reps):
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def fmt(dt):
    return f"{dt * 1e3:9.3f} ms" if dt > 1e-3 else f"{dt * 1e6:9.1f} us"


def main():
    rng = np.random.default_rng(0)
    print(f"{'kernel / shape':<38}" + "".join(f"{n:>16}" for n, _ in BACKENDS))

    widths = [40, 64, 64, 32, 1]
    acts = [1, 1, 1, 1]
    n_params = sum((widths[i] + 1) * widths[i + 1] for i in range(4))
    params = rng.normal(size=n_params) * 0.1
    for batch in (4, 256, 4096):
        x = rng.normal(size=(batch, 40))
        dy = rng.normal(size=(batch, 1))
        cells = []
        for _name, mod in BACKENDS:
            def run(mod=mod):
                _y, cache = mod.mlp_forward(params, widths, acts, x, True)
                mod.mlp_backward(params, widths, acts, cache, dy)
            cells.append(timeit(run, max(3, 1000 // batch)))
        print(f"{'mlp fwd+bwd batch=' + str(batch):<38}"
              + "".join(f"{fmt(c):>16}" for c in cells))

    xs = np.ascontiguousarray(np.linspace(0, 300, 60))
    ys = np.ascontiguousarray(np.sin(np.linspace(0, 3, 60)) * 20.0)
    cells = [timeit(lambda mod=mod: mod.polyline_project(xs, ys, 150.0, 5.0),
                    5000)
             for _n, mod in BACKENDS]
    print(f"{'polyline_project 60 pts':<38}"
          + "".join(f"{fmt(c):>16}" for c in cells))

    states = np.ascontiguousarray(rng.normal(size=(4, 111, 4)) * 5.0)
    lengths = np.full(4, 4.5)
    widths_a = np.full(4, 2.0)
    cells = [timeit(lambda mod=mod: mod.collision_grid(states, lengths,
                                                       widths_a), 50)
             for _n, mod in BACKENDS]
    print(f"{'collision_grid M=4 T=111':<38}"
          + "".join(f"{fmt(c):>16}" for c in cells))

    s = np.ascontiguousarray(np.abs(rng.normal(size=(4, 4))))
    a = np.ascontiguousarray(rng.normal(size=(4, 2)))
    cells = [timeit(lambda mod=mod: mod.unicycle_steps(s, a, 0.1), 20000)
             for _n, mod in BACKENDS]
    print(f"{'unicycle_steps M=4':<38}"
          + "".join(f"{fmt(c):>16}" for c in cells))

    if _speedups is None:
        print("\ncompiled extension not built; showing numpy only")


if __name__ == "__main__":
    main()
