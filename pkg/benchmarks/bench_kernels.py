"""Throughput comparison of the NCE kernel backends.

Two levels:
  kernel  - raw `nce_position_batch` calls on synthetic row indices,
            isolating the hot loop from batch assembly
  epoch   - full training runs through `fit`, which adds packing,
            negative sampling, and the optimizer

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --level kernel --batch 4096 --dim 64
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from anomstream import kernels
from anomstream.ingest import (SynthConfig, generate_synthetic,
                               intern_records, register_default_schema)
from anomstream.schema import Catalog
from anomstream.train import TrainConfig, build_noise_tables, fit


def time_calls(fn, repeats: int, warmup: int = 2) -> float:
    """Median seconds per call."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def bench_kernel(args) -> None:
    rng = np.random.default_rng(args.seed)
    rows = args.rows
    emb = rng.normal(0.0, 0.3, (rows, args.dim))
    prefix_rows = rng.integers(0, rows, (args.batch, args.prefix))
    true_rows = rng.integers(0, rows, args.batch)
    neg_rows = rng.integers(0, rows, (args.batch, args.negatives))
    q_true = rng.random(args.batch) * 0.01
    q_neg = rng.random((args.batch, args.negatives)) * 0.01 + 1e-6
    weights = rng.normal(1.0, 0.1, args.prefix)
    beta = rng.normal(1.0, 0.1, args.dim)

    print(f"kernel level: batch={args.batch} dim={args.dim} "
          f"negatives={args.negatives} prefix={args.prefix}")
    base = None
    for name in kernels.available_backends():
        backend = kernels.get_backend(name)
        grad_emb = np.zeros_like(emb)
        grad_w = np.zeros_like(weights)
        grad_beta = np.zeros_like(beta)

        def call():
            grad_emb[:] = 0.0
            grad_w[:] = 0.0
            grad_beta[:] = 0.0
            backend.nce_position_batch(
                emb, grad_emb, prefix_rows, true_rows, neg_rows, q_true,
                q_neg, weights, beta, -0.1, grad_w, grad_beta)

        per_call = time_calls(call, args.repeats)
        rate = args.batch / per_call
        note = ""
        if base is None:
            base = per_call
        else:
            note = f"  ({base / per_call:.2f}x vs first)"
        print(f"  {name:>8}: {per_call * 1e3:8.3f} ms/call  "
              f"{rate / 1e6:7.2f} M events/s{note}")


def training_set(seed: int):
    """One training window of the bundled synthetic stream."""
    synth = SynthConfig(n_users=120, n_hosts=80, n_processes=40, windows=2,
                        train_windows=1, events_per_window=30000, seed=seed)
    cat = register_default_schema(Catalog())
    records = [r for r in generate_synthetic(synth)
               if r.timestamp < synth.window_seconds]
    events = intern_records(records, cat, synth.window_seconds)
    cat.accumulate_counts(events)
    return events, cat, build_noise_tables(cat)


def bench_epoch(args) -> None:
    events, cat, noises = training_set(args.seed)
    print(f"epoch level: {len(events)} events, dim={args.dim}, "
          f"{args.epochs} epochs")
    base = None
    for name in kernels.available_backends():
        cfg = TrainConfig(dim=args.dim, negatives=args.negatives,
                          epochs=args.epochs, batch_size=args.batch,
                          learning_rate=3e-3, seed=args.seed)
        t0 = time.perf_counter()
        fit(events, cat, cfg, backend_name=name, noises=noises)
        elapsed = time.perf_counter() - t0
        rate = len(events) * args.epochs / elapsed
        note = ""
        if base is None:
            base = elapsed
        else:
            note = f"  ({base / elapsed:.2f}x vs first)"
        print(f"  {name:>8}: {elapsed:7.2f} s  "
              f"{rate / 1e3:7.1f} K events/s{note}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--level", choices=["kernel", "epoch", "both"],
                    default="both")
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--batch", type=int, default=2048)
    ap.add_argument("--negatives", type=int, default=20)
    ap.add_argument("--prefix", type=int, default=3)
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("backends:", ", ".join(kernels.available_backends()))
    if args.level in ("kernel", "both"):
        bench_kernel(args)
    if args.level in ("epoch", "both"):
        bench_epoch(args)


if __name__ == "__main__":
    main()
