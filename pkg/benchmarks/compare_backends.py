"""Time the compiled and pure-numpy sweeps on the same cells.

The backend is fixed at import, so each one runs in its own interpreter.
Usage: python3 benchmarks/compare_backends.py [n ...]
"""
import json
import os
import subprocess
import sys

CHILD = """
import json, sys
from ssgpkit import _accel
from ssgpkit.bench import single_thread, time_cell
out = {"backend": _accel.BACKEND}
time_cell("ssgp", "rbf", 1, 10, reps=1)
with single_thread():
    for n in map(int, sys.argv[1:]):
        out[n] = time_cell("ssgp", "rbf", 1, n, reps=3)[0].mean_ms
print(json.dumps(out))
"""


def run(disable: bool, sizes):
    env = dict(os.environ, SSGPKIT_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", CHILD, *map(str, sizes)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    sizes = [int(a) for a in sys.argv[1:]] or [200, 1000, 6000]
    fast, slow = run(False, sizes), run(True, sizes)
    print(f"{'n':>6} {fast['backend'] + ' ms/pt':>14} {slow['backend'] + ' ms/pt':>14} {'ratio':>7}")
    for n in sizes:
        a, b = fast[str(n)], slow[str(n)]
        print(f"{n:>6} {a:>14.4f} {b:>14.4f} {b / a:>7.1f}")


if __name__ == "__main__":
    main()
