"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Runs one full sweep solve on the 34-bus feeder and a CRC over a max-size
frame with every importable backend, then prints per-call times and speedups.
"""

import argparse
import timeit

import numpy as np

from vvosim import _kernels
from vvosim.feeder import build_ieee34_modified
from vvosim.powerflow import OperatingPoint, SweepProblem


def sweep_call(mod, prob):
    topo, c = prob.topo, prob.coef
    n = topo.n
    vi, jr, ji = np.zeros(n), np.zeros(n), np.zeros(n)
    inv_q, hist = np.zeros(len(prob.inv_par)), np.zeros(100)

    def run():
        vr = np.full(n, float(prob.model.source_voltage))
        mod.sweep(topo.order, topo.parent, topo.zr, topo.zx, prob.ratio, c[0], c[1], c[2], c[3], c[4], c[5],
                  prob.pg, prob.qg, prob.inv_bus, prob.inv_par, float(prob.model.source_voltage),
                  1e-6, 100, vr, vi, jr, ji, inv_q, hist)
    return run


def best_of(fn, repeat):
    number, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    prob = SweepProblem(build_ieee34_modified(),
                        OperatingPoint(load_scale=1.0, p_avail_pvsi={"PV1": 350.0}, taps={"VR1": 2, "VR2": -1}))
    frame = np.random.default_rng(0).integers(0, 256, 292, dtype=np.uint8).tobytes()
    backends = _kernels.backends()
    rows = {}
    for name, mod in backends.items():
        rows[name] = (best_of(sweep_call(mod, prob), args.repeat),
                      best_of(lambda: mod.crc16_dnp(frame), args.repeat))

    print(f"active backend: {_kernels.BACKEND}")
    print(f"{'backend':<8} {'sweep solve':>14} {'crc 292 B':>14}")
    for name, (s, c) in rows.items():
        print(f"{name:<8} {s * 1e6:>11.1f} us {c * 1e6:>11.2f} us")
    if "cython" in rows:
        (ps, pc), (cs, cc) = rows["python"], rows["cython"]
        print(f"speedup  {ps / cs:>13.1f}x {pc / cc:>13.1f}x")
    else:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
