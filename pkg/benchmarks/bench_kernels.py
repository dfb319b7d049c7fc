"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both paths run in one process through the ``numba_path`` switch, so the
numbers compare like with like. Compilation happens in a warm-up call and is
reported separately. Results also check that both paths agree.
"""

import argparse
import time

import numpy as np

from offbrl import _kernels as K
from offbrl.approximator import FeedforwardQ
from offbrl.envs import load_env_spec


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases():
    rng = np.random.default_rng(0)
    net = FeedforwardQ.create([96, 32, 20], dropout_rate=0.2, seed=0)
    X = rng.normal(size=(32, 96))
    masks = net.sample_masks(32, rng)
    dout = rng.normal(size=(32, 20))
    p, lay = net.params, net.layout
    yield "mlp_forward (32x96 -> 32 -> 20)", lambda nb: K.mlp_forward(p, lay, X, masks, numba_path=nb)
    yield "mlp_backward (same net)", lambda nb: K.mlp_backward(p, lay, X, masks, dout, numba_path=nb)
    mdp = load_env_spec("gridworld4x4").with_(gamma=0.9)
    nonterm = mdp.nonterminal
    yield "value_iteration (gridworld4x4)", lambda nb: K.value_iteration(mdp.P, mdp.R, 0.9, nonterm, 1e-12, 10_000,
                                                                           numba_path=nb)
    base = mdp.R / 2.0 + np.log(np.full(mdp.R.shape, 1.0 / mdp.action_count))
    yield "soft_value_iteration (gridworld4x4)", lambda nb: K.soft_value_iteration(mdp.P, base, 0.9, nonterm, 1e-12,
                                                                                     10_000, numba_path=nb)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba not importable; only the numpy path can be timed")
    print(f"{'kernel':40s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s} {'compile s':>10s} agree")
    for name, fn in cases():
        t_np = timed(lambda: fn(False), args.repeat)
        if not K.HAVE_NUMBA:
            print(f"{name:40s} {t_np * 1e6:10.1f}")
            continue
        t0 = time.perf_counter()
        fn(True)
        compile_s = time.perf_counter() - t0
        t_nb = timed(lambda: fn(True), args.repeat)
        a, b = fn(False), fn(True)
        agree = all(np.allclose(x, y, rtol=1e-10, atol=1e-12) for x, y in
                    zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
        print(f"{name:40s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.1f} {compile_s:10.2f} {agree}")


if __name__ == "__main__":
    main()
