"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Also checks that both backends return bit-identical results.
"""
import argparse
import json
import timeit

import numpy as np

from detgen.numkit import kernels

SHAPES = [
    # (rows, fan_in, fan_out): generator layers at stage-2 batch size, detector layers
    (768, 19, 64),
    (768, 64, 64),
    (128, 96, 96),
    (4096, 64, 64),
]


def bench_one(backend, rows, fan_in, fan_out, repeat, rng):
    x = rng.standard_normal((rows, fan_in))
    w = rng.standard_normal((fan_in, fan_out))
    b = rng.standard_normal(fan_out)
    d = rng.standard_normal((rows, fan_out))
    wt = np.ascontiguousarray(w.T)
    calls = {
        "affine": lambda: backend.affine(x, w, b),
        "grad_weight": lambda: backend.grad_weight(x, d),
        "grad_input": lambda: backend.grad_input(d, wt),
    }
    return {name: min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in calls.items()}, calls


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)

    if kernels.compiled_backend is None:
        print("compiled kernels unavailable; only the numpy fallback can be timed")
    rows = []
    for shape in SHAPES:
        py_t, py_calls = bench_one(kernels.python_backend, *shape, args.repeat, np.random.default_rng(0))
        row = {"shape": list(shape), "python_s": py_t}
        if kernels.compiled_backend is not None:
            c_t, c_calls = bench_one(kernels.compiled_backend, *shape, args.repeat, np.random.default_rng(0))
            row["cython_s"] = c_t
            row["identical"] = all(np.array_equal(py_calls[k](), c_calls[k]()) for k in py_calls)
        rows.append(row)

    print(f"{'shape':>18} {'kernel':>12} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for row in rows:
        for k, tp in row["python_s"].items():
            tc = row.get("cython_s", {}).get(k)
            extra = f"{tc * 1e3:10.3f} {tp / tc:8.1f}" if tc else f"{'-':>10} {'-':>8}"
            print(f"{str(tuple(row['shape'])):>18} {k:>12} {tp * 1e3:10.3f} {extra}")
        if "identical" in row:
            print(f"{'':>18} bit-identical: {row['identical']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"active_backend": kernels.BACKEND, "results": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
