"""Single-image latency / throughput measurement."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import torch

MIN_ITERS = 10


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return (f"{cpu}; {os.cpu_count()} logical cpus; torch {torch.__version__} "
            f"({torch.get_num_threads()} threads); {platform.system()} {platform.release()}")


@dataclass
class FpsReport:
    fps: float
    median_ms: float
    mean_ms: float
    iters: int
    warmup: int
    hardware: str
    latencies_ms: List[float] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {"fps": self.fps, "median_ms": self.median_ms, "mean_ms": self.mean_ms,
                "iters": self.iters, "warmup": self.warmup, "hardware": self.hardware}


def fps_benchmark(model: Callable, images: Sequence, warmup: int = 10, iters: int = 100) -> FpsReport:
    """Time ``model(image)`` one image at a time; FPS = 1 / median latency.

    The first ``warmup`` calls run but are not recorded. ``images`` is cycled.
    """
    if iters < MIN_ITERS:
        raise ValueError(f"iters must be >= {MIN_ITERS}, got {iters}")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    if not len(images):
        raise ValueError("no images to time")
    latencies = []
    with torch.no_grad():
        for i in range(warmup + iters):
            image = images[i % len(images)]
            t0 = time.perf_counter()
            model(image)
            dt = time.perf_counter() - t0
            if i >= warmup:
                latencies.append(dt * 1000.0)
    median = statistics.median(latencies)
    return FpsReport(1000.0 / median, median, statistics.fmean(latencies), iters, warmup,
                     hardware_descriptor(), latencies)
