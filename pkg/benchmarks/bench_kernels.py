"""Times every hot kernel under the numpy fallback and the compiled extension.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes follow a training batch of the default model (B=128, L=31, d=64) and a
full-ranking evaluation batch over 3000 items;
the refinement case is a 64-way split of 640 item embeddings.
"""

import argparse
import json
import time

import numpy as np

from dtrec import kernels
from dtrec.kernels import _fallback


def cases(rng):
    x = rng.normal(size=(128, 31, 64)).astype(np.float32)
    g = rng.normal(size=x.shape).astype(np.float32)
    gamma = np.ones(64, np.float32)
    beta = np.zeros(64, np.float32)
    _, xhat, inv = _fallback.layer_norm_forward(x, gamma, beta, 1e-5)
    ids = rng.integers(0, 3001, size=(128, 31))
    scores = rng.normal(size=(512, 3001)).astype(np.float32)
    targets = rng.integers(1, 3001, size=512)
    X = rng.normal(size=(3000, 64))
    C = X[:200].copy()
    labels = _fallback.assign_nearest(X, C)[0]
    Xs = X[:640, :32].copy()
    start = _fallback.assign_nearest(Xs, Xs[:64])[0]
    return {
        "all_finite": (x,),
        "layer_norm_forward": (x, gamma, beta, 1e-5),
        "layer_norm_backward": (g, xhat, inv, gamma),
        "gelu_forward": (x,),
        "gelu_backward": (g, x),
        "scatter_add_rows": (3001, ids, x),
        "assign_nearest": (X, C),
        "accumulate_centers": (X, labels, 200),
        "count_ranks": (scores, targets),
        "hartigan_refine": (Xs, start, 64),
    }


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    if kernels.BACKEND != "compiled":
        print("compiled extension not built; only the fallback can be timed")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':22s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  default")
    for name, a in cases(rng).items():
        py = best_of(kernels.implementation(name, "python"), a, args.repeat)
        comp = None
        if kernels.BACKEND == "compiled":
            comp = best_of(kernels.implementation(name, "compiled"), a, args.repeat)
        chosen = "python" if kernels.implementation(name) is getattr(_fallback, name) else "compiled"
        rows.append({"kernel": name, "python_ms": py, "compiled_ms": comp, "default": chosen})
        comp_s = f"{comp:12.3f}" if comp is not None else f"{'-':>12s}"
        speed = f"{py / comp:8.2f}" if comp else f"{'-':>8s}"
        print(f"{name:22s} {py:10.3f} {comp_s} {speed}  {chosen}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
