"""Time the LSTM recurrence kernels: numba vs pure numpy.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes mirror a batch of dialogues: (steps, batch, 4*hidden).
"""
import argparse
import timeit

import numpy as np

from emocaps import kernels
from emocaps._accel import HAS_NUMBA

SHAPES = [(8, 1, 32), (12, 30, 128), (40, 30, 128), (12, 64, 256)]


def bench(fn, args, repeat):
    fn(*args)  # warm-up (triggers JIT compilation)
    times = timeit.repeat(lambda: fn(*args), number=5, repeat=repeat)
    return min(times) / 5


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAS_NUMBA:
        print("numba unavailable (or disabled); only the numpy kernels are timed")
    rng = np.random.default_rng(0)
    print(f"{'L':>4} {'B':>4} {'H':>4}  {'pass':<8} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for L, B, H in SHAPES:
        xp = rng.standard_normal((L, B, 4 * H))
        w = rng.standard_normal((H, 4 * H)) / np.sqrt(H)
        hs, cs, gates = kernels.lstm_forward_numpy(xp, w)
        dhs = rng.standard_normal(hs.shape)
        cases = [("forward", kernels.lstm_forward_numpy, kernels.lstm_forward_numba, (xp, w)),
                 ("backward", kernels.lstm_backward_numpy, kernels.lstm_backward_numba,
                  (dhs, hs, cs, gates, w))]
        for name, f_np, f_nb, fargs in cases:
            t_np = bench(f_np, fargs, args.repeat)
            if HAS_NUMBA:
                t_nb = bench(f_nb, fargs, args.repeat)
                print(f"{L:>4} {B:>4} {H:>4}  {name:<8} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} "
                      f"{t_np / t_nb:>7.2f}x")
            else:
                print(f"{L:>4} {B:>4} {H:>4}  {name:<8} {t_np * 1e3:>10.3f} {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
