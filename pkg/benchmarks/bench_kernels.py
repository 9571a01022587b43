"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Times every kernel on model-sized inputs, then one STParNet training step
and one inference batch end to end, under each available backend.
"""
import argparse
import json
import statistics
import time

import numpy as np

from lipar.autodiff import AdamState, kernels
from lipar.candata import stack_windows, synthetic_windows
from lipar.model import build_stparnet, forward
from lipar.train import train_step


def _time(fn, repeat):
    fn()  # warm caches
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def kernel_cases(rng):
    f32 = np.float32
    xp = rng.standard_normal((32, 128, 11, 11)).astype(f32)  # padded 9x9 map
    w = rng.standard_normal((128, 3, 3)).astype(f32)
    gout = rng.standard_normal((32, 128, 5, 5)).astype(f32)
    cols = kernels.im2col(rng.standard_normal((32, 64, 4, 4)).astype(f32), 3, 1, 2, 2)
    z = rng.standard_normal((32, 128)).astype(f32)
    c = rng.standard_normal((32, 32)).astype(f32)
    act, c_new, tc, h = kernels.lstm_cell_forward(z, c)
    dh = rng.standard_normal((32, 32)).astype(f32)
    return {
        "dw_forward": lambda: kernels.dw_forward(xp, w, 2, 5, 5),
        "dw_backward": lambda: kernels.dw_backward(xp, w, gout, 2),
        "im2col": lambda: kernels.im2col(xp, 3, 1, 9, 9),
        "col2im": lambda: kernels.col2im(cols, 64, 4, 4, 3, 1, 2, 2),
        "lstm_cell_forward": lambda: kernels.lstm_cell_forward(z, c),
        "lstm_cell_backward": lambda: kernels.lstm_cell_backward(act, c, tc, dh, dh),
    }


def end_to_end_cases():
    images, seqs, labels = stack_windows(synthetic_windows(8, seed=0)[:32])
    params = build_stparnet(0)
    opt = AdamState()
    rng = np.random.default_rng(0)
    return {
        "train_step_b32": lambda: train_step(params, opt, images, seqs, labels, rng),
        "infer_b32": lambda: forward(params, images, seqs),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    results = {}
    for name in backends:
        with kernels.using_backend(name):
            cases = {**kernel_cases(np.random.default_rng(0)), **end_to_end_cases()}
            results[name] = {k: _time(fn, args.repeat) for k, fn in cases.items()}

    print(f"{'case':<20}" + "".join(f"{b + ' (ms)':>16}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for case in results[backends[0]]:
        row = f"{case:<20}" + "".join(f"{results[b][case] * 1e3:>16.3f}" for b in backends)
        if "cython" in results and "python" in results:
            row += f"{results['python'][case] / results['cython'][case]:>11.1f}x"
        print(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
