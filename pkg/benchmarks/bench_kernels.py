"""Timing comparison of the compiled and numpy kernel backends.

Run as: python3 benchmarks/bench_kernels.py [--repeats N]

Shapes mirror what training actually sees with the toy config: softmax rows
are attention score rows, layer-norm rows are token states, cross-entropy
rows are decoder positions over the vocabulary, and the AdamW vector is the
full flattened backbone.
"""

import argparse
import time

import numpy as np

import synpara.kernels as kernels


def _bench(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(rng):
    x_attn = np.ascontiguousarray(rng.normal(size=(2048, 72)))
    g_attn = np.ascontiguousarray(rng.normal(size=(2048, 72)))
    y_attn = None  # filled per backend from softmax_fwd
    x_tok = np.ascontiguousarray(rng.normal(size=(1024, 32)))
    g_tok = np.ascontiguousarray(rng.normal(size=(1024, 32)))
    gamma = np.ascontiguousarray(rng.normal(size=32))
    beta = np.ascontiguousarray(rng.normal(size=32))
    logits = np.ascontiguousarray(rng.normal(size=(512, 62)))
    targets = rng.integers(0, 62, size=512)
    targets[::9] = 0
    pvec = np.ascontiguousarray(rng.normal(size=46720))
    gvec = np.ascontiguousarray(rng.normal(size=46720))
    return {
        "gelu_fwd": lambda k: (k.gelu_fwd, (x_tok,)),
        "gelu_bwd": lambda k: (k.gelu_bwd, (x_tok, g_tok)),
        "softmax_fwd": lambda k: (k.softmax_fwd, (x_attn,)),
        "softmax_bwd": lambda k: (k.softmax_bwd, (k.softmax_fwd(x_attn), g_attn)),
        "layer_norm_fwd": lambda k: (k.layer_norm_fwd, (x_tok, gamma, beta, 1e-5)),
        "layer_norm_bwd": lambda k: (
            k.layer_norm_bwd,
            (x_tok, gamma) + tuple(np.asarray(a) for a in k.layer_norm_fwd(x_tok, gamma, beta, 1e-5)[1:]) + (g_tok,),
        ),
        "cross_entropy_fwd": lambda k: (k.cross_entropy_fwd, (logits, targets, 0)),
        "adamw_update": lambda k: (
            k.adamw_update,
            (pvec.copy(), gvec, np.zeros_like(pvec), np.zeros_like(pvec),
             1, 1e-3, 0.9, 0.999, 1e-8, 0.01),
        ),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    if len(backends) < 2:
        print("compiled backend not built; timing the numpy backend only")

    mods = {}
    for name in backends:
        kernels.use_backend(name)
        from synpara import _pykernels

        if name == "py":
            mods[name] = _pykernels
        else:
            from synpara import _ckernels

            mods[name] = _ckernels
    kernels.use_backend("auto")

    cases = make_cases(np.random.default_rng(0))
    width = max(len(k) for k in cases)
    header = f"{'kernel'.ljust(width)}  " + "  ".join(f"{b:>10s}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8s}"
    print(header)
    for case_name, make in cases.items():
        times = []
        for b in backends:
            fn, fn_args = make(mods[b])
            times.append(_bench(fn, fn_args, args.repeats))
        line = f"{case_name.ljust(width)}  " + "  ".join(
            f"{t * 1e6:>8.1f}us" for t in times
        )
        if len(times) == 2:
            line += f"  {times[1] / times[0]:>7.2f}x"
        print(line)


if __name__ == "__main__":
    main()
