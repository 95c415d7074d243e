"""Compare the numba and pure-numpy kernel backends, then time each attention kind.

    python3 benchmarks/bench_kernels.py [--grid 56] [--channels 96] [--trials 5] [--out report.json]

The backend switch is the same one ``MVIT_MECHANICS_NUMBA=0`` flips at import time.
"""

import argparse
import json
import sys

from mvit_mechanics import bench
from mvit_mechanics.tensor import kernels


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--grid", type=int, default=56, help="square token grid side")
    parser.add_argument("--channels", type=int, default=96)
    parser.add_argument("--trials", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    grid = (args.grid, args.grid)

    kernel_rows = bench.bench_kernels(grid, args.channels, args.trials, args.seed)
    print(f"{'op':<12}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>9}")
    for row in kernel_rows:
        numpy_ms = row["numpy_median_s"] * 1e3
        numba_ms = row.get("numba_median_s", float("nan")) * 1e3
        print(f"{row['op']:<12}{numpy_ms:>12.2f}{numba_ms:>12.2f}{numpy_ms / numba_ms:>8.1f}x")
    if not kernels.HAVE_NUMBA:
        print("numba unavailable: only the numpy backend was timed", file=sys.stderr)

    # attention timings are capped at 4096 tokens, so large grids fall back to 56x56
    attn_grid = grid if args.grid ** 2 <= bench.MAX_TOKENS else (56, 56)
    rows = bench.bench_attention(attn_grid, trials=max(args.trials, 5), seed=args.seed)
    print(f"\n{'kind':<10}{'L_k':>6}{'median (ms)':>13}{'score bytes/token':>19}")
    for r in rows:
        print(f"{r.kind:<10}{r.L_k:>6}{r.median_s * 1e3:>13.2f}{r.score_bytes_per_token:>19.0f}")

    if args.out:
        doc = bench.report_dict(rows, attn_grid, args.seed)
        doc["kernels"] = kernel_rows
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
