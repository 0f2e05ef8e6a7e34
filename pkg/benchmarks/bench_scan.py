"""Compare the compiled and pure-Python line scanners.

    python3 benchmarks/bench_scan.py [--layers 400] [--repeat 5]
"""
from __future__ import annotations

import argparse
import statistics
import time

from gcode_screen.gcode import kernels
from gcode_screen.synth import render_gcode, sample_parameters


def _best(fn, lines, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(lines)
        times.append(time.perf_counter() - t)
    return min(times), statistics.median(times)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    text = render_gcode("MK4S", "PLA", sample_parameters("MK4S", "PLA", "ND"), layers=args.layers)
    # pad each layer with extra moves so the file resembles a real part
    lines = []
    for line in text.split("\n"):
        lines.append(line)
        if line.startswith("G1 X") and " E" in line:
            lines.extend([line] * 20)
    print(f"{len(lines)} lines, {args.repeat} repeats")

    py_best, py_med = _best(kernels.python_scan_lines, lines, args.repeat)
    print(f"python   scan_lines  best {py_best * 1e3:8.1f} ms  median {py_med * 1e3:8.1f} ms")
    if kernels.compiled_scan_lines is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 0
    if kernels.compiled_scan_lines(lines) != kernels.python_scan_lines(lines):
        print("MISMATCH between backends")
        return 1
    c_best, c_med = _best(kernels.compiled_scan_lines, lines, args.repeat)
    print(f"compiled scan_lines  best {c_best * 1e3:8.1f} ms  median {c_med * 1e3:8.1f} ms")
    print(f"speedup {py_best / c_best:.1f}x")

    args_z = kernels.python_scan_lines(lines)[:3]
    pz, _ = _best(lambda _: kernels.python_z_layer_starts(*args_z), None, args.repeat)
    cz, _ = _best(lambda _: kernels.compiled_z_layer_starts(*args_z), None, args.repeat)
    print(f"z_layer_starts  python {pz * 1e3:.1f} ms  compiled {cz * 1e3:.1f} ms  speedup {pz / cz:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
