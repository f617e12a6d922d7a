"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on inputs of realistic size (one 512-point frame for the
masking kernels, a clip's worth of symbols for the Huffman kernels) and the
best-of-N wall time is reported together with the speedup.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from psycal import kernels
from psycal.pam import bark, neighbourhood_widths
from psycal.quantizer import build_huffman
from psycal.spectral import psd_spl


def cases(rng):
    t = np.arange(512)
    frame = sum(a * np.sin(2 * np.pi * f * t / 44100) for a, f in ((0.3, 440), (0.1, 2500), (0.05, 9000)))
    frame = frame + 0.01 * rng.standard_normal(512)
    psd = psd_spl(frame, 44100).values
    widths = neighbourhood_widths(257, 44100 / 512)
    z = bark(np.arange(257) * 44100 / 512)
    zm = np.sort(rng.uniform(0, 24, 40))
    lv = rng.uniform(20, 90, 40)
    symbols = rng.choice(64, size=100_000, p=np.arange(64, 0, -1) / np.arange(65).sum())
    table = build_huffman(symbols, 64)
    data, nbits = kernels.python_backend.huffman_pack(symbols, table.codes, table.lengths)
    smr = rng.uniform(-10, 60, 25)
    return {
        "tonal_peaks": lambda b: b.tonal_peaks(psd, widths, 7.0),
        "spread_thresholds": lambda b: b.spread_thresholds(z, zm, lv, 0.275, -6.025, -200.0),
        "huffman_pack (1e5 symbols)": lambda b: b.huffman_pack(symbols, table.codes, table.lengths),
        "huffman_unpack (1e5 symbols)": lambda b: b.huffman_unpack(
            data, nbits, symbols.size, table.first_code, table.first_index, table.len_count,
            table.sorted_symbols),
        "greedy_allocate (budget 400)": lambda b: b.greedy_allocate(smr, 400, 6.0206),
    }


def best_time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 1_000_000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    if kernels.compiled_backend is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':32s} {'python':>12s} {'cython':>12s} {'speedup':>9s}")
    for name, call in cases(rng).items():
        py = best_time(lambda: call(kernels.python_backend), args.repeat)
        cy = best_time(lambda: call(kernels.compiled_backend), args.repeat)
        rows.append({"kernel": name, "python_s": py, "cython_s": cy, "speedup": py / cy})
        print(f"{name:32s} {py * 1e6:10.1f}us {cy * 1e6:10.1f}us {py / cy:8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
