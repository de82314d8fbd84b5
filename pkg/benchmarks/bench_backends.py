"""Compare the numba kernel backend against the pure-numpy fallback.

Times the two fused hot kernels (expert feed-forward forward+backward,
concordance pair scan) by calling both implementations directly, then times
a full training epoch under each backend in a subprocess (backend selection
happens at import via HDMOE_BACKEND).

Usage: python benchmarks/bench_backends.py [--skip-train]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from hdmoe import kernels  # noqa: E402


def best_of(fn, repeats=5, inner=200):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def bench_ffn(n_tokens, token_len, hidden, rng):
    x = rng.uniform(-1, 1, (n_tokens, token_len))
    w1 = rng.uniform(-1, 1, (token_len, hidden))
    b1 = rng.uniform(-1, 1, (1, hidden))
    w2 = rng.uniform(-1, 1, (hidden, token_len))
    b2 = rng.uniform(-1, 1, (1, token_len))
    g = rng.uniform(-1, 1, (n_tokens, token_len))

    rows = []
    for name, fwd, bwd in (
        ("numpy", kernels.ffn_forward_numpy, kernels.ffn_backward_numpy),
        ("numba", kernels.ffn_forward_numba, kernels.ffn_backward_numba),
    ):
        if fwd is None:
            continue
        out, pre, sig = fwd(x, w1, b1, w2, b2)  # warm up / compile

        def both(fwd=fwd, bwd=bwd):
            _, pre, sig = fwd(x, w1, b1, w2, b2)
            bwd(g, x, w1, w2, pre, sig)

        rows.append((name, best_of(both)))
    return rows


def bench_concordance(n, rng):
    times = rng.uniform(0, 50, n)
    events = rng.integers(0, 2, n)
    risks = rng.normal(size=n)
    rows = []
    for name, fn in (
        ("numpy", kernels.concordance_counts_numpy),
        ("numba", kernels.concordance_counts_numba),
    ):
        if fn is None:
            continue
        fn(times, events, risks)  # warm up / compile
        rows.append((name, best_of(lambda fn=fn: fn(times, events, risks), inner=20)))
    return rows


def print_rows(title, rows):
    print(f"\n{title}")
    base = None
    for name, secs in rows:
        label = f"  {name:6s} {secs * 1e6:10.1f} us/call"
        if base is None:
            base = secs
            print(label)
        else:
            print(f"{label}   ({base / secs:.2f}x vs numpy)")


TRAIN_SNIPPET = """
import time
import numpy as np
from hdmoe import data as hd, model as hm, trainer as ht, kernels
model_cfg = hm.ModelConfig(d_in=32, d1=32, d2=64, token_len_l1=8, token_len_l2=4,
                           num_experts=4, top_k=1, expansion=4, num_bins=4)
synth = hd.SynthConfig(cohort=60, d_in=32)
records, _ = hd.generate_synthetic(synth, np.random.default_rng(0))
records = hd.make_folds(records, 2, seed=0)
ht.train_fold(records, 0, model_cfg, ht.TrainConfig(seed=0, epochs=1, k_folds=2))  # warm up
t0 = time.monotonic()
ht.train_fold(records, 0, model_cfg, ht.TrainConfig(seed=0, epochs=5, k_folds=2))
steps = 5 * sum(1 for r in records if r.fold != 0)
print(f"{kernels.active_backend()}: {(time.monotonic() - t0) / steps * 1000:.2f} ms/step")
"""


def bench_train_epoch():
    print("\nfull training step (subprocess per backend)")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, HDMOE_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True
        )
        if proc.returncode != 0:
            print(f"  {backend}: failed\n{proc.stderr}")
        else:
            print("  " + proc.stdout.strip())


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--skip-train", action="store_true",
                        help="only benchmark the kernels, not a training epoch")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    if kernels.ffn_forward_numba is None:
        print("numba unavailable: numpy fallback only")
    print_rows("expert ffn fwd+bwd, desk scale (16 tokens, len 4, hidden 16)",
               bench_ffn(16, 4, 16, rng))
    print_rows("expert ffn fwd+bwd, full scale (16 tokens, len 32, hidden 128)",
               bench_ffn(16, 32, 128, rng))
    print_rows("concordance scan, n=200", bench_concordance(200, rng))
    print_rows("concordance scan, n=2000", bench_concordance(2000, rng))
    if not args.skip_train:
        bench_train_epoch()


if __name__ == "__main__":
    main()
