"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_backends.py [--scales small,medium,large] [--repeat 3]

Prints voxels/sec per stage for each backend and the speedup of the compiled
core over the fallback.
"""
import argparse
import sys

from sfpnet import _backend
from sfpnet.bench import SCALES, run_bench


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scales", default=",".join(SCALES))
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    backends = _backend.available()
    rows = run_bench(args.scales.split(","), backends, args.repeat)
    rate = {(r["scale"], r["backend"], r["stage"]): r for r in rows}
    header = f"{'scale':<8}{'stage':<10}{'voxels':>8}" + "".join(f"{b + ' vox/s':>16}" for b in backends)
    if "cython" in backends and "python" in backends:
        header += f"{'speedup':>10}"
    print(header)
    for scale in args.scales.split(","):
        for stage in ("voxelize", "rulebook", "submconv", "sfpm"):
            cells = [rate[scale, b, stage] for b in backends]
            line = f"{scale:<8}{stage:<10}{cells[0]['voxels']:>8}"
            line += "".join(f"{c['voxels_per_sec']:>16,.0f}" for c in cells)
            if len(cells) == 2:
                line += f"{cells[0]['voxels_per_sec'] / cells[1]['voxels_per_sec']:>9.2f}x"
            print(line)
    if "cython" not in backends:
        print("compiled core not built; only the fallback was measured", file=sys.stderr)


if __name__ == "__main__":
    main()
