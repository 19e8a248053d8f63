"""Single-thread CPU latency harness.

Timings use synthetic features: encoder cost does not depend on content.
The headline number is the median; deltas follow the usual sign convention
(negative = faster than the baseline).
"""

from __future__ import annotations

import contextlib
import csv
import gc
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import numerics as nx
from .frontend import N_MELS, SAMPLE_RATE, num_frames
from .model import Encoder, EncoderConfig, SequenceBatch, build, count_params

CSV_COLUMNS = ["model", "params", "policy", "layers", "median_ms", "mean_ms", "std_ms",
               "delta_vs_baseline_pct"]


class ConfigurationError(RuntimeError):
    pass


@dataclass
class SyntheticUtterance:
    features: np.ndarray
    labels: list


def synthetic_utterance(duration_s: float, transcript_len: int = 0, vocab_size: int = 257,
                        seed: int = 0) -> SyntheticUtterance:
    """Seeded Gaussian features for ``duration_s`` of 16 kHz audio plus a random transcript."""
    T = num_frames(int(round(duration_s * SAMPLE_RATE)))
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((T, N_MELS))
    labels = rng.integers(1, vocab_size, size=transcript_len).tolist()
    return SyntheticUtterance(feats, labels)


@contextlib.contextmanager
def single_thread():
    """Pin BLAS/OpenMP pools to one thread and verify that it took effect."""
    with threadpool_limits(limits=1):
        busy = [p for p in threadpool_info() if p.get("num_threads", 1) > 1]
        if busy:
            raise ConfigurationError(
                "multi-threaded math detected: " + ", ".join(f"{p['internal_api']}={p['num_threads']}" for p in busy))
        yield


@contextlib.contextmanager
def _gc_paused():
    # same as timeit: a collection landing inside one pass skews that sample
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


@dataclass
class BenchEntry:
    name: str
    params: int
    policy: str
    layers: str
    frames: int
    output_length: int
    times: list = field(default_factory=list)
    stage_times: dict = field(default_factory=dict)  # mean seconds per stage

    @property
    def median(self) -> float:
        return statistics.median(self.times)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.times)

    @property
    def std(self) -> float:
        return statistics.pstdev(self.times)


@dataclass
class BenchReport:
    entries: list
    duration_s: float
    repeats: int

    @property
    def baseline(self) -> BenchEntry:
        return self.entries[0]

    def delta_pct(self, entry: BenchEntry) -> float:
        base = self.baseline.median
        return 100.0 * (entry.median - base) / base

    def rows(self) -> list[dict]:
        return [{
            "model": e.name,
            "params": e.params,
            "policy": e.policy,
            "layers": e.layers,
            "median_ms": f"{1e3 * e.median:.1f}",
            "mean_ms": f"{1e3 * e.mean:.1f}",
            "std_ms": f"{1e3 * e.std:.1f}",
            "delta_vs_baseline_pct": f"{self.delta_pct(e):+.1f}",
        } for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(CSV_COLUMNS) + " |",
                 "|" + "---|" * len(CSV_COLUMNS)]
        for row in self.rows():
            lines.append("| " + " | ".join(str(row[c]) for c in CSV_COLUMNS) + " |")
        return "\n".join(lines) + "\n"


def _entry(name: str, encoder: Encoder, frames: int) -> BenchEntry:
    cfg = encoder.config
    return BenchEntry(name, count_params(encoder), cfg.policy.level_text(), cfg.policy.layers_text(),
                      frames, int(encoder.output_lengths([frames])[0]))


def _timed_pass(encoder: Encoder, batch: SequenceBatch, entry: BenchEntry | None) -> None:
    profile: dict = {}
    t0 = time.perf_counter()
    with nx.no_grad():
        encoder.forward(batch, profile=profile)
    elapsed = time.perf_counter() - t0
    if entry is not None:
        entry.times.append(elapsed)
        for k, v in profile.items():
            entry.stage_times[k] = entry.stage_times.get(k, 0.0) + v


def _finish(entry: BenchEntry) -> BenchEntry:
    n = len(entry.times)
    entry.stage_times = {k: v / n for k, v in entry.stage_times.items()}
    return entry


def _check_args(threads: int, repeats: int) -> None:
    if threads != 1:
        raise ConfigurationError(f"only single-thread timing is supported, got threads={threads}")
    if repeats < 5:
        raise ValueError(f"repeats must be >= 5, got {repeats}")


def time_forward(encoder: Encoder, duration_s: float = 30.0, threads: int = 1, repeats: int = 10,
                 seed: int = 0, warmup: int = 2, name: str = "model") -> BenchEntry:
    """Median-of-``repeats`` inference latency for one synthetic utterance (float32)."""
    _check_args(threads, repeats)
    utt = synthetic_utterance(duration_s, seed=seed)
    batch = SequenceBatch.from_list([utt.features.astype(np.float32)])
    encoder = encoder.to(np.float32)
    entry = _entry(name, encoder, len(utt.features))
    with single_thread(), _gc_paused():
        for _ in range(warmup):
            _timed_pass(encoder, batch, None)
        for _ in range(repeats):
            _timed_pass(encoder, batch, entry)
    return _finish(entry)


def compare(models, duration_s: float = 30.0, repeats: int = 10, seed: int = 0,
            warmup: int = 2, threads: int = 1) -> BenchReport:
    """Time each ``(name, EncoderConfig)``; the first is the baseline.

    Passes are interleaved round-robin across models so slow drifts in machine
    load hit every model alike.
    """
    models = list(models)
    if len(models) < 2:
        raise ValueError("compare needs a baseline and at least one candidate")
    _check_args(threads, repeats)
    utt = synthetic_utterance(duration_s, seed=seed)
    batch = SequenceBatch.from_list([utt.features.astype(np.float32)])
    encoders = [(name, build(cfg, seed).to(np.float32)) for name, cfg in models]
    entries = [_entry(name, enc, len(utt.features)) for name, enc in encoders]
    with single_thread(), _gc_paused():
        for _ in range(warmup):
            for _, enc in encoders:
                _timed_pass(enc, batch, None)
        for _ in range(repeats):
            for (_, enc), entry in zip(encoders, entries):
                _timed_pass(enc, batch, entry)
    return BenchReport([_finish(e) for e in entries], duration_s, repeats)

