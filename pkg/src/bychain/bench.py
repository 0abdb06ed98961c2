"""Micro-benchmarks for the signature primitives.

Only summary statistics are reported; absolute latency depends on hardware.
"""
from __future__ import annotations

import random
import statistics
import time
from dataclasses import dataclass

from . import crypto

OPS = ("keygen", "sign", "verify", "hash")


@dataclass(frozen=True)
class BenchStats:
    op: str
    iterations: int
    min_us: float
    mean_us: float
    max_us: float
    success_rate: float = 1.0

    def row(self) -> list:
        return [self.op, self.iterations, f"{self.min_us:.3f}", f"{self.mean_us:.3f}",
                f"{self.max_us:.3f}", f"{self.success_rate:.6f}"]


BENCH_SCHEMA = "crypto-bench/1"
BENCH_HEADER = ["op", "iterations", "min_us", "mean_us", "max_us", "success_rate"]


def run_bench(op: str, iterations: int, seed: int = 0) -> BenchStats:
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}; choose from {', '.join(OPS)}")
    if iterations < 1:
        raise ValueError("iterations must be positive")
    rng = random.Random(seed)
    keys = crypto.generate_keypair(rng)
    messages = [rng.randbytes(64) for _ in range(min(iterations, 1024))]
    sigs = [crypto.sign(keys.private_key, m) for m in messages] if op == "verify" else []
    samples = []
    ok = 0
    clock = time.perf_counter_ns
    for i in range(iterations):
        msg = messages[i % len(messages)]
        if op == "keygen":
            start = clock()
            crypto.generate_keypair(rng)
            samples.append(clock() - start)
            ok += 1
        elif op == "sign":
            start = clock()
            crypto.sign(keys.private_key, msg)
            samples.append(clock() - start)
            ok += 1
        elif op == "verify":
            sig = sigs[i % len(sigs)]
            # Bypass the memo so every iteration does the curve arithmetic.
            start = clock()
            good = crypto._verify.__wrapped__(keys.public_key, msg, sig)
            samples.append(clock() - start)
            ok += good
        else:
            start = clock()
            crypto.hash(msg)
            samples.append(clock() - start)
            ok += 1
    us = [s / 1000 for s in samples]
    return BenchStats(op, iterations, min(us), statistics.fmean(us), max(us), ok / iterations)
