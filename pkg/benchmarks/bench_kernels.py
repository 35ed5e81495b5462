"""Time the numba kernels against their numpy twins.

Usage: python benchmarks/bench_kernels.py [--repeat 5]

Sizes mirror a desk-scale run: a proximity set of a few hundred to a few
thousand frames, three to five machines, two output dimensions, and a
batch of validation queries.
"""

import argparse
import timeit

import numpy as np

from proxens import _kernels as K

CASES = [
    # (S proximity frames, M machines, N outputs, K queries)
    (200, 3, 2, 50),
    (1000, 5, 2, 100),
    (5000, 5, 3, 200),
]


def best_of(fn, repeat):
    fn()  # warm up (triggers jit compilation on the numba side)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_consensus(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for S, M, N, Kq in CASES:
        P = rng.uniform(size=(S, M, N))
        Q = rng.uniform(size=(Kq, M, N))
        Y = rng.uniform(size=(S, N))
        fb = Q.mean(axis=1)

        def run(dist, pred):
            D = dist(P, Q)
            return pred(D, Y, fb, 0.05, M // 2 + 1)

        t_np = best_of(lambda: run(K.np_prediction_distances, K.np_consensus_predict), repeat)
        t_nb = best_of(lambda: run(K.nb_prediction_distances, K.nb_consensus_predict), repeat)
        rows.append((f"consensus S={S} M={M} N={N} K={Kq}", t_np, t_nb))
    return rows


def bench_frames(repeat):
    rng = np.random.default_rng(1)
    rows = []
    for P, d in [(800, 10), (4000, 10), (20000, 15)]:
        stored = rng.normal(size=(P, d))
        q = rng.normal(size=d)
        t_np = best_of(lambda: K.np_frame_distances(stored, q), repeat)
        t_nb = best_of(lambda: K.nb_frame_distances(stored, q), repeat)
        rows.append((f"frame distances P={P} d={d}", t_np, t_nb))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = bench_consensus(args.repeat) + bench_frames(args.repeat)
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {1e3 * t_np:>10.3f}  {1e3 * t_nb:>10.3f}  {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
