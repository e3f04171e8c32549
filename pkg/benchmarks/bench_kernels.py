"""Compare the numba and pure-numpy kernel paths.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once per backend to warm up (numba compilation, caches),
then timed over ``--repeat`` runs; the best time is reported together with
the largest absolute difference between the two backends' outputs.
"""

import argparse
import time

import numpy as np

from memrobust import _accel, certify, kernels, neural


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    seq = np.cumsum(rng.normal(0.1, 1.0, size=200_000))
    yield "longest_increasing_run n=2e5", lambda nb: np.array(kernels.longest_increasing_run(seq, use_numba=nb))

    net = neural.DenseNetwork.init([2, 10, 2], seed=0)
    params = np.repeat(net.flat_params()[None, :], 20_000, axis=0)
    params *= rng.random(params.shape) < 0.8
    x = np.array([0.3, -0.7])
    yield "forward_batch 20000 x 2-10-2", lambda nb: kernels.forward_batch(params, net.layout(), x, use_numba=nb)

    tiny = neural.DenseNetwork.init([2, 4, 2], seed=1, noise=(0.2, 0.3))
    coords = certify.certified_coordinates(tiny)
    atoms, probs = certify.mask_atoms(coords.size, 0.2, 0.3)
    deltas = np.where(rng.random((64, coords.size)) < 0.5, 0.5, 1.0)
    yield (f"enumerate_smoothed 64 deltas x 3^{coords.size} atoms",
           lambda nb: kernels.enumerate_smoothed(tiny.flat_params(), coords, deltas, atoms, probs,
                                                 tiny.layout(), x, use_numba=nb))

    # one hidden layer holds every coordinate: the numba path factors by unit
    levels, level_probs = certify._mask_levels(0.2, 0.3)
    yield (f"enumerate_smoothed factored, 64 x 3^{coords.size}",
           lambda nb: kernels.enumerate_smoothed(tiny.flat_params(), coords, deltas, atoms, probs,
                                                 tiny.layout(), x, use_numba=nb,
                                                 levels=levels, level_probs=level_probs))


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy path can run")
    print(f"{'kernel':<48} {'numpy [s]':>10} {'numba [s]':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, fn in cases():
        t_np = best_time(lambda: fn(False), args.repeat)
        if _accel.HAVE_NUMBA:
            t_nb = best_time(lambda: fn(True), args.repeat)
            diff = float(np.max(np.abs(fn(True) - fn(False))))
            print(f"{name:<48} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>7.1f}x {diff:>11.2e}")
        else:
            print(f"{name:<48} {t_np:>10.4f} {'-':>10} {'-':>8} {'-':>11}")


if __name__ == "__main__":
    main()
