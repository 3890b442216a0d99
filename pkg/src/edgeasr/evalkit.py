"""ASR metrics: WER, streaming WER, RTFx, BSF, delay and effective latency."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

_PUNCT = re.compile(r"[^\w\s']|_")
_EDGE_APOS = re.compile(r"(?<!\w)'|'(?!\w)")


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words

    def to_dict(self) -> dict:
        return {**asdict(self), "wer": self.wer}


@dataclass(frozen=True)
class LatencyMetrics:
    rtfx: float
    delay_s: float
    effective_latency_s: float
    per_chunk_rtfx: tuple[float, ...] = ()

    @property
    def min_chunk_rtfx(self) -> float:
        return min(self.per_chunk_rtfx) if self.per_chunk_rtfx else self.rtfx

    @property
    def dropout(self) -> bool:
        return self.min_chunk_rtfx < 1.0

    @classmethod
    def from_timings(
        cls,
        delay_s: float,
        chunk_durations: Sequence[float],
        chunk_timings: Sequence[float],
        extra_time_s: float = 0.0,
    ) -> "LatencyMetrics":
        """Overall RTFx counts ``extra_time_s`` (e.g. end-of-stream flush); per-chunk RTFx does not."""
        total = rtfx(sum(chunk_durations), sum(chunk_timings) + extra_time_s)
        per = tuple(rtfx(d, t) for d, t in zip(chunk_durations, chunk_timings))
        return cls(total, delay_s, effective_latency(delay_s, total), per)

    def to_dict(self) -> dict:
        return {
            "rtfx": self.rtfx,
            "delay_s": self.delay_s,
            "effective_latency_s": self.effective_latency_s,
            "min_chunk_rtfx": self.min_chunk_rtfx,
            "dropout": self.dropout,
        }


@dataclass
class EvalReport:
    datasets: list[tuple[str, WerBreakdown]]
    average_wer: float
    latency: LatencyMetrics | None = None
    bsf: float | None = None
    batch_baseline: float | None = None
    model_size_bytes: int | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "datasets": [{"name": n, **b.to_dict()} for n, b in self.datasets],
            "average_wer": self.average_wer,
            "bsf": self.bsf,
            "batch_baseline": self.batch_baseline,
            "latency": self.latency.to_dict() if self.latency else None,
            "model_size_bytes": self.model_size_bytes,
            "config": self.config,
        }


def normalize_text(raw: str) -> list[str]:
    """Lowercase, drop punctuation except apostrophes inside words, split on whitespace."""
    text = _PUNCT.sub(" ", raw.lower())
    text = _EDGE_APOS.sub(" ", text)
    return text.split()


def edit_ops(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """(S, I, D) along one minimal-cost alignment.

    On equal-cost backtrace choices the order is substitution/match, then
    insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ri != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dele += 1
            i -= 1
    return s, ins, dele


def wer(ref: Sequence[str], hyp: Sequence[str]) -> WerBreakdown:
    if not ref:
        raise ValueError("reference must contain at least one word")
    s, i, d = edit_ops(ref, hyp)
    return WerBreakdown(s, i, d, len(ref))


def streaming_wer(ref: Sequence[str], chunk_outputs: Iterable[str]) -> WerBreakdown:
    """WER of the transcript assembled from all chunk outputs, in order."""
    return wer(ref, normalize_text("".join(chunk_outputs)))


def rtfx(audio_duration_s: float, processing_time_s: float) -> float:
    if audio_duration_s <= 0 or processing_time_s <= 0:
        raise ValueError("durations must be positive")
    return audio_duration_s / processing_time_s


def bsf(streaming_wer: float, batch_wer: float) -> float:
    if batch_wer <= 0:
        raise ValueError("batch WER must be positive")
    return streaming_wer / batch_wer


def effective_latency(delay_s: float, rtfx: float) -> float:
    """Algorithmic delay plus one chunk of compute, for delay == chunk duration."""
    if delay_s <= 0 or rtfx <= 0:
        raise ValueError("delay and RTFx must be positive")
    return delay_s * (1.0 + 1.0 / rtfx)


def aggregate_report(
    per_dataset: Sequence[tuple[str, WerBreakdown]],
    latency: LatencyMetrics | None = None,
    batch_baseline: float | None = None,
    **extra,
) -> EvalReport:
    """Unweighted mean of per-dataset WERs; BSF when a batch baseline is given.

    ``batch_baseline`` is in the same units as the WER fractions.
    """
    if not per_dataset:
        raise ValueError("need at least one dataset")
    avg = math.fsum(b.wer for _, b in per_dataset) / len(per_dataset)
    ratio = bsf(avg, batch_baseline) if batch_baseline is not None else None
    return EvalReport(list(per_dataset), avg, latency, ratio, batch_baseline, **extra)


# ---------------------------------------------------------------------------
# files


def read_transcripts(path: str | Path) -> dict[str, str]:
    """``ID<TAB>text`` per line; blank lines skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected ID<TAB>text")
        uid, text = line.split("\t", 1)
        if uid in out:
            raise ValueError(f"{path}:{lineno}: duplicate id {uid!r}")
        out[uid] = text
    return out


def dataset_of(uid: str) -> str:
    """Utterance ids of the form ``dataset/utt`` group by dataset; others fall in ``default``."""
    return uid.split("/", 1)[0] if "/" in uid else "default"


def score_files(refs: dict[str, str], hyps: dict[str, str]) -> list[tuple[str, WerBreakdown]]:
    """Pooled WER per dataset over matching utterance ids."""
    if set(refs) != set(hyps):
        missing = sorted(set(refs) ^ set(hyps))[:5]
        raise ValueError(f"reference and hypothesis ids differ, e.g. {missing}")
    totals: dict[str, list[int]] = {}
    for uid, ref_text in refs.items():
        ref = normalize_text(ref_text)
        if not ref:
            continue
        s, i, d = edit_ops(ref, normalize_text(hyps[uid]))
        t = totals.setdefault(dataset_of(uid), [0, 0, 0, 0])
        t[0] += s
        t[1] += i
        t[2] += d
        t[3] += len(ref)
    if not totals:
        raise ValueError("no scorable reference utterances")
    return [(name, WerBreakdown(*t)) for name, t in totals.items()]


def write_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    p = out_dir / "report.json"
    p.write_text(json.dumps(report.to_dict(), indent=2))
    paths.append(p)

    lines = [f"{'dataset':<20} {'S':>6} {'I':>6} {'D':>6} {'N':>7} {'WER%':>8}"]
    for name, b in report.datasets:
        lines.append(f"{name:<20} {b.substitutions:>6} {b.insertions:>6} {b.deletions:>6} {b.ref_words:>7} {100 * b.wer:>8.2f}")
    lines.append("")
    lines.append(f"average WER (unweighted): {100 * report.average_wer:.2f}%")
    if report.bsf is not None:
        lines.append(f"BSF: {report.bsf:.2f} (batch baseline {100 * report.batch_baseline:.2f}%)")
    if report.latency is not None:
        lat = report.latency
        lines.append(f"RTFx: {lat.rtfx:.2f}  delay: {lat.delay_s:.2f}s  effective latency: {lat.effective_latency_s:.3f}s")
    p = out_dir / "report.txt"
    p.write_text("\n".join(lines) + "\n")
    paths.append(p)

    size = report.model_size_bytes if report.model_size_bytes is not None else ""
    rows = {
        "plot_delay_wer.csv": ("delay_s", report.latency.delay_s if report.latency else ""),
        "plot_size_wer.csv": ("model_size_bytes", size),
        "plot_rtfx_wer.csv": ("rtfx", report.latency.rtfx if report.latency else ""),
    }
    for fname, (col, val) in rows.items():
        p = out_dir / fname
        with p.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label", col, "wer_percent"])
            w.writerow([report.config.get("label", "run"), val, f"{100 * report.average_wer:.4f}"])
        paths.append(p)
    return paths


__all__ = [
    "EvalReport", "LatencyMetrics", "WerBreakdown", "aggregate_report", "bsf", "edit_ops",
    "effective_latency", "normalize_text", "read_transcripts", "rtfx", "score_files",
    "streaming_wer", "wer", "write_report",
]

