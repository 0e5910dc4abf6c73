"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

Kernel timings use realistic shapes: a training batch of 64 videos for label
refinement and a 400-video evaluation split for event matching.  With
``--end-to-end`` the script also times ``jomold.training.evaluate`` in two
subprocesses, one per backend, since the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from jomold import _accel, kernels


def refine_inputs(rng, b=64, c=10):
    y = (rng.random((b, c)) < 0.2).astype(np.int8)
    la, lv = rng.exponential(size=(b, c)), rng.exponential(size=(b, c))
    n_pos = y.sum(axis=0)
    m_a = (0.1 * n_pos).astype(np.int64)
    m_v = (0.25 * n_pos).astype(np.int64)
    return la, lv, y, m_a, m_v, True, True, True


def match_inputs(rng, v=400, t=10, c=10):
    gt = (rng.random((v, t, c)) < 0.15).astype(np.int8)
    pred = gt ^ (rng.random((v, t, c)) < 0.1).astype(np.int8)
    return pred, gt, 0.5


def bench(fn, args, repeat):
    fn(*args)  # compile or warm caches
    times = timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)
    return min(times), float(np.median(times))


_E2E = """
import time, numpy as np
from jomold import _accel, model as mdl, training
from jomold.synthgen import GeneratorConfig, generate_dataset
ds = generate_dataset(GeneratorConfig(num_videos=400, seed=0))
d, t, c = ds.dims
params = mdl.ModelParams.init(mdl.ModelConfig(d, t, c), np.random.default_rng(0))
training.evaluate(params, ds)
t0 = time.perf_counter()
for _ in range(5):
    training.evaluate(params, ds)
print(_accel.BACKEND, (time.perf_counter() - t0) / 5)
"""


def end_to_end():
    for flag in ("0", "1"):
        env = dict(os.environ, JOMOLD_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _E2E], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"evaluate 400 videos  {out[0]:<6} {1e3 * float(out[1]):9.2f} ms")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--end-to-end", action="store_true")
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    cases = [
        ("refine_labels", refine_inputs(rng),
         [("numba", kernels.refine_labels if _accel.HAVE_NUMBA else None),
          ("numpy", kernels.refine_labels_numpy)]),
        ("event_match_counts", match_inputs(rng),
         [("numba", kernels.event_match_counts if _accel.HAVE_NUMBA else None),
          ("numpy", kernels.event_match_counts_numpy)]),
    ]
    print(f"{'kernel':<20} {'backend':<7} {'best ms':>9} {'median ms':>10}")
    for name, inputs, impls in cases:
        for backend, fn in impls:
            if fn is None:
                print(f"{name:<20} {backend:<7} {'n/a':>9}")
                continue
            best, median = bench(fn, inputs, args.repeat)
            print(f"{name:<20} {backend:<7} {1e3 * best:9.3f} {1e3 * median:10.3f}")
    if args.end_to_end:
        end_to_end()


if __name__ == "__main__":
    main()
