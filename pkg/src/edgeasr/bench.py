"""Streaming benchmark on synthetic audio."""

from __future__ import annotations

import csv
import gc
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .evalkit import effective_latency, rtfx
from .mel import synthetic_audio
from .transducer import StreamingConfig, Transducer, init_session, stream_audio


def worker_cap(requested: int | None = None) -> int:
    """Worker count limited by ``ESTM_THREADS`` when set."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    env = os.environ.get("ESTM_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValueError(f"ESTM_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ValueError("ESTM_THREADS must be >= 1")
        n = min(n, cap)
    return max(1, n)


@dataclass(frozen=True)
class RunTiming:
    config: tuple[int, int, int]
    repeat: int
    rtfx: float
    chunk_rtfx: tuple[float, ...]
    n_tokens: int

    @property
    def min_chunk_rtfx(self) -> float:
        return min(self.chunk_rtfx)


@dataclass(frozen=True)
class BenchRow:
    config: str
    chunk_s: float
    history_s: float
    delay_s: float
    repeats: int
    rtfx_mean: float
    rtfx_median: float
    rtfx_min: float
    min_chunk_rtfx: float
    typical_min_chunk_rtfx: float
    dropout: bool
    effective_latency_s: float

    def to_dict(self) -> dict:
        return asdict(self)


def time_stream(model: Transducer, cfg: StreamingConfig, audio) -> tuple[float, tuple[float, ...], int]:
    """One streamed pass; returns (RTFx, per-chunk RTFx, token count)."""
    session = init_session(model, cfg)
    step = cfg.frames_per_chunk * model.mel_cfg.hop
    # whole chunks only, so every timed push encodes exactly one chunk
    audio = audio[: max(1, len(audio) // step) * step]
    tokens = stream_audio(session, audio)
    total = rtfx(sum(session.chunk_durations), sum(session.chunk_timings) + session.flush_time_s)
    per_chunk = tuple(rtfx(d, t) for d, t in zip(session.chunk_durations, session.chunk_timings))
    return total, per_chunk, len(tokens)


def _warmup(model: Transducer, cfg: StreamingConfig, audio) -> None:
    time_stream(model, cfg, audio[: cfg.frames_per_chunk * model.mel_cfg.hop * 2])


def _timed(model: Transducer, cfg: StreamingConfig, audio, r: int) -> RunTiming:
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        total, per_chunk, n = time_stream(model, cfg, audio)
    finally:
        if was_enabled:
            gc.enable()
    return RunTiming(cfg.as_tuple(), r, total, per_chunk, n)


def _run_config(model: Transducer, cfg: StreamingConfig, repeat: int, audio) -> list[RunTiming]:
    _warmup(model, cfg, audio)
    return [_timed(model, cfg, audio, r) for r in range(repeat)]


def summarize(cfg: StreamingConfig, runs: Sequence[RunTiming]) -> BenchRow:
    """Aggregate repeats of one config.

    ``min_chunk_rtfx`` is the worst single chunk over all repeats.
    ``typical_min_chunk_rtfx`` first takes, for each chunk position, the median
    RTFx across repeats, then the minimum over positions; it separates chunks
    that are structurally slow from one-off scheduler stalls.
    """
    rates = [r.rtfx for r in runs]
    mean = statistics.fmean(rates)
    min_chunk = min(r.min_chunk_rtfx for r in runs)
    per_position = zip(*(r.chunk_rtfx for r in runs))
    typical = min(statistics.median(p) for p in per_position)
    return BenchRow(
        config=",".join(map(str, cfg.as_tuple())),
        chunk_s=cfg.chunk_duration_s,
        history_s=cfg.history_window_s,
        delay_s=cfg.delay_s,
        repeats=len(runs),
        rtfx_mean=mean,
        rtfx_median=statistics.median(rates),
        rtfx_min=min(rates),
        min_chunk_rtfx=min_chunk,
        typical_min_chunk_rtfx=typical,
        dropout=min_chunk < 1.0,
        effective_latency_s=effective_latency(cfg.delay_s, mean),
    )


def run_bench(
    model: Transducer,
    configs: Sequence[StreamingConfig],
    repeat: int = 5,
    seconds: float = 4.0,
    seed: int = 0,
    workers: int = 1,
) -> tuple[list[BenchRow], list[RunTiming]]:
    """Benchmark each config on the same seeded audio.

    Single-worker runs interleave configs within each repeat so slow drift in
    machine speed hits all configs alike.  With ``workers > 1`` each config runs
    whole in its own process; results are merged in config order either way.
    """
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    if not configs:
        raise ValueError("need at least one config")
    audio = synthetic_audio(seed, seconds, model.mel_cfg.sample_rate)
    configs = list(configs)
    n = len(configs)
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n)) as pool:
            results = list(pool.map(_run_config, [model] * n, configs, [repeat] * n, [audio] * n))
    else:
        for cfg in configs:
            _warmup(model, cfg, audio)
        results = [[] for _ in configs]
        for r in range(repeat):
            for i, cfg in enumerate(configs):
                results[i].append(_timed(model, cfg, audio, r))
    rows = [summarize(c, runs) for c, runs in zip(configs, results)]
    return rows, [t for runs in results for t in runs]


def write_bench_csv(rows: Sequence[BenchRow], path: str | Path) -> None:
    path = Path(path)
    fields = list(BenchRow.__dataclass_fields__)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow(row.to_dict())


def write_latency_plot_csv(rows: Sequence[BenchRow], path: str | Path) -> None:
    """Algorithmic delay against effective latency, one point per config."""
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "delay_s", "effective_latency_s", "rtfx_mean"])
        for row in rows:
            w.writerow([row.config, row.delay_s, row.effective_latency_s, row.rtfx_mean])
