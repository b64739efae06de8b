"""Compare the compiled and NumPy kernel backends.

    python benchmarks/bench_kernels.py [--seconds 6] [--repeat 20]

Times the filterbank forward (with and without keeping the filtered signal),
its backward, and the row softmax used by attention, on a float32 utterance
of the given length.  Both backends are checked against each other before
timing.
"""
import argparse
import time

import numpy as np

from deepgesi._kernels import _pykernels as py

try:
    from deepgesi._kernels import _ckernels as cy
except ImportError:
    cy = None


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return np.median(times) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=6.0)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--taps", type=int, default=129)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = int(16000 * args.seconds)
    win, hop = 400, 160
    x = rng.standard_normal(n).astype(np.float32) * 0.1
    h = rng.standard_normal((args.channels, args.taps)).astype(np.float32) * 0.05
    T = 1 + (n - win) // hop
    att = rng.standard_normal((4, T, T)).astype(np.float32)
    dpooled = rng.standard_normal((args.channels, T)).astype(np.float32)

    backends = [("numpy", py)] + ([("cython", cy)] if cy is not None else [])
    if cy is None:
        print("compiled extension not built; timing the NumPy backend only")
    else:
        y_py, p_py = py.lfb_forward(x, h, win, hop)
        y_cy, p_cy = cy.lfb_forward(x, h, win, hop)
        g_py = py.lfb_backward(x, y_py, dpooled, args.taps, win, hop)
        g_cy = cy.lfb_backward(x, y_cy, dpooled, args.taps, win, hop)
        print(f"parity: pooled {np.abs(p_py - p_cy).max():.2e}  "
              f"grad {np.abs(g_py - g_cy).max() / np.abs(g_py).max():.2e} (rel)  "
              f"softmax {np.abs(py.softmax_last(att) - cy.softmax_last(att)).max():.2e}")

    print(f"{args.seconds:g} s utterance, {args.channels} x {args.taps} kernels, "
          f"attention {att.shape}; median of {args.repeat} runs in ms")
    print(f"{'kernel':<26}" + "".join(f"{name:>10}" for name, _ in backends) + ("   speedup" if cy else ""))
    rows = [
        ("lfb forward (keep y)", lambda k: (lambda: k.lfb_forward(x, h, win, hop, True))),
        ("lfb forward (no y)", lambda k: (lambda: k.lfb_forward(x, h, win, hop, False))),
        ("lfb backward", lambda k: (lambda y=k.lfb_forward(x, h, win, hop)[0]:
                                    k.lfb_backward(x, y, dpooled, args.taps, win, hop))),
        ("softmax rows", lambda k: (lambda: k.softmax_last(att))),
    ]
    for label, make in rows:
        ms = [timeit(make(k), args.repeat) for _, k in backends]
        line = f"{label:<26}" + "".join(f"{m:>10.2f}" for m in ms)
        if len(ms) == 2:
            line += f"{ms[0] / ms[1]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
