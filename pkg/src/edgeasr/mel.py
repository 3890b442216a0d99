"""Log-mel features, offline and streaming.

Frame ``i`` covers samples ``[i*hop, i*hop + window)`` of the pre-emphasized
signal; there is no left padding, so the first frame needs a full window.  The
streaming extractor carries the not-yet-framed tail of the signal between pushes
and produces exactly the frames the offline extractor would on the concatenated
audio.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

CHUNK_UNIT_S = 0.08


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    window: int = 400
    hop: int = 160
    n_mels: int = 80
    preemphasis: float = 0.97
    log_floor: float = 2.0**-24
    n_fft: int = 512

    def __post_init__(self) -> None:
        if not 0 < self.hop <= self.window:
            raise ValueError("need 0 < hop <= window")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.n_fft < self.window:
            raise ValueError("n_fft must be >= window")
        unit = CHUNK_UNIT_S * self.sample_rate
        if abs(unit / self.hop - round(unit / self.hop)) > 1e-9:
            raise ValueError("80 ms must be a whole number of hops")

    @property
    def hops_per_unit(self) -> int:
        return round(CHUNK_UNIT_S * self.sample_rate / self.hop)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """n_mels + 2 frequencies (Hz): lower edge, centers, upper edge."""
    return mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters with Slaney area normalization, shape (n_mels, n_fft//2 + 1)."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_band_edges(cfg)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    fb = np.maximum(0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _window(n: int) -> np.ndarray:
    w = np.hanning(n)
    w.setflags(write=False)
    return w


def n_frames(n_samples: int, cfg: MelConfig) -> int:
    if n_samples < cfg.window:
        return 0
    return 1 + (n_samples - cfg.window) // cfg.hop


def _frames_to_logmel(sig: np.ndarray, count: int, cfg: MelConfig) -> np.ndarray:
    if count == 0:
        return np.zeros((0, cfg.n_mels))
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(count)[:, None]
    frames = sig[idx] * _window(cfg.window)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(cfg).T
    return np.log(mel + cfg.log_floor)


def mel_batch(audio, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Log-mel features of a whole utterance, shape (frames, n_mels)."""
    x = np.asarray(audio, dtype=np.float64).reshape(-1)
    if x.size < cfg.window:
        raise ValueError(f"audio has {x.size} samples, need at least one window ({cfg.window})")
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - cfg.preemphasis * x[:-1]
    return _frames_to_logmel(y, n_frames(x.size, cfg), cfg)


@dataclass
class MelRingState:
    """Per-stream extractor state.

    ``carry`` holds the pre-emphasized samples from the start of the next
    unemitted frame onward.  Its capacity is fixed, so the state does not grow
    with stream length.
    """

    cfg: MelConfig = field(default_factory=MelConfig)
    carry: np.ndarray = field(init=False)
    carry_len: int = 0
    prev_sample: float = 0.0
    frames_emitted: int = 0
    started: bool = False

    def __post_init__(self) -> None:
        # enough for (window - hop) rounded up to whole hops
        hops = -(-(self.cfg.window - self.cfg.hop) // self.cfg.hop)
        self.carry = np.zeros(hops * self.cfg.hop)

    @property
    def carried(self) -> np.ndarray:
        return self.carry[: self.carry_len]

    def nbytes(self) -> int:
        return self.carry.nbytes + 8 * 4


def mel_push_chunk(audio_chunk, state: MelRingState) -> np.ndarray:
    """Append hop-aligned audio to the stream; return the frames it completes.

    Once the stream holds at least a window of samples, each push of ``k`` hops
    yields exactly ``k`` frames.
    """
    cfg = state.cfg
    x = np.asarray(audio_chunk, dtype=np.float64).reshape(-1)
    if x.size == 0 or x.size % cfg.hop:
        raise ValueError(f"chunk length {x.size} is not a positive multiple of hop {cfg.hop}")
    y = np.empty_like(x)
    y[0] = x[0] - (cfg.preemphasis * state.prev_sample if state.started else 0.0)
    y[1:] = x[1:] - cfg.preemphasis * x[:-1]
    state.prev_sample = float(x[-1])
    state.started = True

    sig = np.concatenate([state.carried, y])
    count = n_frames(sig.size, cfg)
    feats = _frames_to_logmel(sig, count, cfg)
    rest = sig[count * cfg.hop :]
    state.carry[: rest.size] = rest
    state.carry_len = rest.size
    state.frames_emitted += count
    return feats


# ---------------------------------------------------------------------------
# audio I/O


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Canonical 44-byte-header PCM16 mono WAV -> (float samples in [-1, 1), sample rate)."""
    data = Path(path).read_bytes()
    if len(data) < 44 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")
    fmt, channels, rate = struct.unpack_from("<HHI", data, 20)
    (bits,) = struct.unpack_from("<H", data, 34)
    if fmt != 1 or channels != 1 or bits != 16:
        raise ValueError(f"{path}: need PCM16 mono, got format={fmt} channels={channels} bits={bits}")
    if data[36:40] != b"data":
        raise ValueError(f"{path}: expected canonical 44-byte header")
    (size,) = struct.unpack_from("<I", data, 40)
    pcm = np.frombuffer(data[44 : 44 + size], dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


def write_wav(path: str | Path, audio, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.rint(np.asarray(audio, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


def read_raw_f32(path: str | Path) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").astype(np.float64)


def synthetic_audio(seed: int, seconds: float, sample_rate: int = 16000) -> np.ndarray:
    """Seeded speech-like test signal: gated tone glides over low-level noise."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    out = 0.01 * rng.standard_normal(n)
    seg = int(0.25 * sample_rate)
    for start in range(0, n, seg):
        stop = min(n, start + seg)
        if rng.random() < 0.3:
            continue
        f0, f1 = rng.uniform(120, 1800, size=2)
        tt = t[start:stop] - t[start]
        dur = max(tt[-1], 1e-3) if tt.size else 1e-3
        phase = 2 * np.pi * (f0 * tt + 0.5 * (f1 - f0) * tt**2 / dur)
        env = np.sin(np.pi * tt / dur) ** 2
        out[start:stop] += rng.uniform(0.05, 0.4) * env * np.sin(phase)
    return out
