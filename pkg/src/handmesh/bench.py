"""Forward-latency and parameter-count benchmarking."""

import time

import numpy as np

from .autograd import Tensor
from .model import INPUT_CHANNELS
from .rng import substream
from .train import build_model


def run_bench(cfg, iters=50, warmup=5, batch_size=1):
    """Time bare forward passes on one fixed input; report parameter split."""
    if iters < 10:
        raise ValueError(f"need at least 10 timed iterations, got {iters}")
    model = build_model(cfg)
    img = Tensor(substream(cfg.seed, "bench-input")
                 .normal(size=(batch_size, INPUT_CHANNELS, 224, 224)).astype(np.float32))
    for _ in range(warmup):
        model(img)
    times = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        model(img)
        times[i] = time.perf_counter() - t0
    backbone, non_backbone = model.param_count_split()
    ms = times * 1e3
    return {
        "iterations": iters,
        "warmup": warmup,
        "batch_size": batch_size,
        "latency_ms": {
            "mean": float(ms.mean()),
            "median": float(np.median(ms)),
            "p95": float(np.percentile(ms, 95)),
        },
        "params": {
            "backbone": int(backbone),
            "non_backbone": int(non_backbone),
            "total": int(backbone + non_backbone),
        },
    }
