"""End-to-end inference latency and peak transient memory for one recording."""

from __future__ import annotations

import json
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from .config import RunConfig
from .features import Featurizer
from .model import checkpoint_bytes, predict


@dataclass
class BenchmarkReport:
    runs: int
    segments: int
    duration_sec: float
    latency_mean_sec: float
    latency_std_sec: float
    latencies_sec: list
    peak_memory_mean_bytes: float
    peak_memory_std_bytes: float
    model_size_bytes: int
    predicted_label: str

    def to_json(self):
        return json.dumps(asdict(self), indent=2)


def classify_recording(params, rec, featurizer):
    """segment -> filter -> normalize -> image -> forward -> majority vote."""
    _, images = featurizer.recording_images(rec)
    if len(images) == 0:
        raise ValueError(f"recording {rec.recording_id!r} yields no segments")
    probs, _, _ = predict(params, images.astype(params.dtype, copy=False))
    votes = np.argmax(probs, axis=1)
    label = "ILD" if votes.mean() > 0.5 or (votes.mean() == 0.5 and probs[:, 1].mean() > probs[:, 0].mean()) \
        else "Healthy"
    return label, probs


def benchmark_inference(params, rec, runs=10, cfg=None, memory_runs=3, model_size_bytes=None):
    """Wall-clock the whole pipeline ``runs`` times (after one warm-up).

    Peak memory is the tracemalloc peak of separate traced runs, so tracing
    overhead never leaks into the latency figures.
    """
    if runs < 10:
        raise ValueError("benchmark needs at least 10 timed runs")
    feat = Featurizer(cfg or RunConfig())
    label, probs = classify_recording(params, rec, feat)  # warm-up
    latencies = []
    for _ in range(runs):
        t0 = time.perf_counter()
        classify_recording(params, rec, feat)
        latencies.append(time.perf_counter() - t0)

    peaks = []
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        for _ in range(memory_runs):
            tracemalloc.reset_peak()
            base = tracemalloc.get_traced_memory()[0]
            classify_recording(params, rec, feat)
            peaks.append(tracemalloc.get_traced_memory()[1] - base)
    finally:
        if not was_tracing:
            tracemalloc.stop()

    if model_size_bytes is None:
        model_size_bytes = len(checkpoint_bytes(params))
    lat = np.asarray(latencies)
    return BenchmarkReport(
        runs=runs,
        segments=len(probs),
        duration_sec=rec.duration_sec,
        latency_mean_sec=float(lat.mean()),
        latency_std_sec=float(lat.std(ddof=1)),
        latencies_sec=[float(v) for v in lat],
        peak_memory_mean_bytes=float(np.mean(peaks)),
        peak_memory_std_bytes=float(np.std(peaks, ddof=1)) if len(peaks) > 1 else 0.0,
        model_size_bytes=int(model_size_bytes),
        predicted_label=label,
    )
