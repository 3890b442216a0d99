"""Weight-only block quantization: RTN, k-quant, and mixed-precision planning.

Every block is mapped to unsigned n-bit codes with an affine reconstruction
``w_hat = scale * q + offset``.  RTN derives the map from the block range; k-quant
searches a small set of scales around the RTN scale and refits the affine map per
candidate by importance-weighted least squares.

The block routines are vectorized over rows: a ``(n_blocks, b)`` array is treated
as ``n_blocks`` independent blocks of equal length.
"""

from __future__ import annotations

import fnmatch
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .tensorstore import ModelContainer, QuantizedTensor, TensorF32, container_size_bytes


class Scheme(str, Enum):
    RTN = "rtn"
    KQUANT = "kquant"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    block_size: int = 32
    scheme: Scheme = Scheme.KQUANT
    candidate_count: int = 20
    candidate_span: tuple[float, float] = (0.85, 1.15)

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")
        if self.block_size < 2:
            raise ValueError("block_size must be >= 2")
        if self.candidate_count < 1:
            raise ValueError("candidate_count must be >= 1")
        lo, hi = self.candidate_span
        if not (0 < lo < hi):
            raise ValueError(f"candidate_span must satisfy 0 < lo < hi, got {self.candidate_span}")
        if not (lo <= 1.0 <= hi):
            raise ValueError("candidate_span must contain 1.0 so the RTN scale is a candidate")

    def candidate_factors(self) -> np.ndarray:
        """Scale multipliers applied to the RTN scale.

        Uniform and endpoint-inclusive over the span, with the grid point nearest
        1.0 snapped to exactly 1.0 so the RTN scale is always evaluated.
        """
        lo, hi = self.candidate_span
        f = np.linspace(lo, hi, self.candidate_count)
        f[int(np.argmin(np.abs(f - 1.0)))] = 1.0
        return f


@dataclass(frozen=True)
class KQuantFit:
    alpha: np.ndarray
    s_star: float
    m_star: float
    weighted_error: float


@dataclass(frozen=True)
class QuantBlock:
    q: np.ndarray
    scale: float
    offset: float
    bits: int
    zero_point: int | None = None
    fit: KQuantFit | None = None

    def dequantize(self) -> np.ndarray:
        return self.scale * self.q.astype(np.float64) + self.offset


class AffineFit(NamedTuple):
    scale: float
    offset: float
    weighted_error: float
    degenerate: bool


def _check_finite(w: np.ndarray) -> None:
    if not np.all(np.isfinite(w)):
        raise ValueError("block contains non-finite values")


# ---------------------------------------------------------------------------
# vectorized row kernels


def _rtn_codes(w: np.ndarray, scale: np.ndarray, w_min: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Codes and zero-points for rows of ``w`` at the given per-row scales (scale > 0)."""
    qmax = (1 << bits) - 1
    z = np.rint(-w_min / scale)
    q = np.clip(np.rint(w / scale[:, None] + z[:, None]), 0, qmax)
    return q, z


def rtn_rows(w: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """RTN over rows. Returns (codes, scale, offset, zero_point)."""
    w = np.asarray(w, dtype=np.float64)
    w_min = w.min(axis=1)
    w_max = w.max(axis=1)
    scale = (w_max - w_min) / ((1 << bits) - 1)
    flat = scale == 0
    safe = np.where(flat, 1.0, scale)
    q, z = _rtn_codes(w, safe, w_min, bits)
    q[flat] = 0
    z[flat] = 0
    offset = np.where(flat, w_min, -scale * z)
    return q.astype(np.uint8), scale, offset, z.astype(np.int64)


def importance_rows(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    rms = np.sqrt(np.mean(w * w, axis=1, keepdims=True))
    return rms + np.abs(w)


def weighted_error_rows(q: np.ndarray, w: np.ndarray, alpha: np.ndarray, scale: np.ndarray, offset: np.ndarray) -> np.ndarray:
    r = scale[..., None] * q + offset[..., None] - w
    return np.sum(alpha * r * r, axis=-1)


def affine_fit_rows(q: np.ndarray, w: np.ndarray, alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Weighted least-squares (scale, offset) per row via the centered normal equations.

    Works on any leading shape; the last axis is the block.  Rows whose codes are
    all identical are degenerate: scale 0, offset = weighted mean of ``w``.
    """
    q = q.astype(np.float64)
    a_sum = alpha.sum(axis=-1)
    safe_sum = np.where(a_sum > 0, a_sum, 1.0)
    q_bar = (alpha * q).sum(axis=-1) / safe_sum
    w_bar = (alpha * w).sum(axis=-1) / safe_sum
    dq = q - q_bar[..., None]
    sqq = (alpha * dq * dq).sum(axis=-1)
    sqw = (alpha * dq * (w - w_bar[..., None])).sum(axis=-1)
    degenerate = sqq <= 0
    scale = np.where(degenerate, 0.0, sqw / np.where(degenerate, 1.0, sqq))
    offset = w_bar - scale * q_bar
    err = weighted_error_rows(q, w, alpha, scale, offset)
    return scale, offset, err, degenerate


def kquant_rows(w: np.ndarray, cfg: QuantConfig) -> dict[str, np.ndarray]:
    """k-quant over rows; returns codes, scale, offset, weighted_error, alpha, rtn_* fields."""
    w = np.asarray(w, dtype=np.float64)
    n_rows, b = w.shape
    alpha = importance_rows(w)
    q_rtn, s_rtn, m_rtn, z_rtn = rtn_rows(w, cfg.bits)
    rtn_err = weighted_error_rows(q_rtn.astype(np.float64), w, alpha, s_rtn, m_rtn)

    flat = s_rtn == 0
    factors = cfg.candidate_factors()
    safe = np.where(flat, 1.0, s_rtn)
    w_min = w.min(axis=1)

    # candidates on a leading axis: (n_cand, n_rows, b)
    cand_q = np.empty((factors.size, n_rows, b))
    for i, f in enumerate(factors):
        cand_q[i], _ = _rtn_codes(w, safe * f, w_min, cfg.bits)
    s, m, err, _ = affine_fit_rows(cand_q, w[None], alpha[None])

    # lowest error; ties go to the factor closest to 1.0, then the smaller factor
    dist = np.abs(factors - 1.0)
    order = np.lexsort((factors, dist))
    err_o = err[order]
    pick = order[np.argmin(err_o, axis=0)]
    rows = np.arange(n_rows)
    codes = cand_q[pick, rows]
    scale = s[pick, rows]
    offset = m[pick, rows]
    best_err = err[pick, rows]

    # the RTN map itself is a feasible (scale, offset); never do worse than it
    keep_rtn = rtn_err < best_err
    factor = np.where(keep_rtn, 1.0, factors[pick])
    codes[keep_rtn] = q_rtn[keep_rtn]
    scale = np.where(keep_rtn, s_rtn, scale)
    offset = np.where(keep_rtn, m_rtn, offset)
    best_err = np.where(keep_rtn, rtn_err, best_err)

    # constant block: exact reconstruction
    codes[flat] = 0
    scale = np.where(flat, 0.0, scale)
    offset = np.where(flat, w_min, offset)
    best_err = np.where(flat, 0.0, best_err)
    return {
        "codes": codes.astype(np.uint8),
        "scale": scale,
        "offset": offset,
        "weighted_error": best_err,
        "alpha": alpha,
        "factor": np.where(flat, 1.0, factor),
        "rtn_scale": s_rtn,
        "rtn_offset": m_rtn,
        "rtn_error": rtn_err,
        "zero_point": z_rtn,
    }


# ---------------------------------------------------------------------------
# single-block API


def rtn_quantize_block(w, n: int) -> QuantBlock:
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    if w.size == 0:
        raise ValueError("empty block")
    _check_finite(w)
    q, s, m, z = rtn_rows(w, n)
    return QuantBlock(q=q[0], scale=float(s[0]), offset=float(m[0]), bits=n, zero_point=int(z[0]))


def kquant_importance(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    if w.size == 0:
        raise ValueError("empty block")
    _check_finite(w)
    return importance_rows(w)[0]


def kquant_affine_fit(q, w, alpha) -> AffineFit:
    q = np.asarray(q, dtype=np.float64).reshape(1, -1)
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(1, -1)
    if not (q.shape == w.shape == alpha.shape):
        raise ValueError("q, w and alpha must have equal length")
    s, m, err, degenerate = affine_fit_rows(q, w, alpha)
    return AffineFit(float(s[0]), float(m[0]), float(err[0]), bool(degenerate[0]))


def kquant_quantize_block(w, cfg: QuantConfig) -> QuantBlock:
    if cfg.scheme is not Scheme.KQUANT:
        raise ValueError("kquant_quantize_block needs scheme=KQUANT")
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    if w.size == 0:
        raise ValueError("empty block")
    _check_finite(w)
    r = kquant_rows(w, cfg)
    fit = KQuantFit(
        alpha=r["alpha"][0], s_star=float(r["scale"][0]), m_star=float(r["offset"][0]),
        weighted_error=float(r["weighted_error"][0]),
    )
    return QuantBlock(
        q=r["codes"][0], scale=fit.s_star, offset=fit.m_star, bits=cfg.bits,
        zero_point=int(r["zero_point"][0]), fit=fit,
    )


# ---------------------------------------------------------------------------
# tensors


def _quantize_rows(w: np.ndarray, cfg: QuantConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if cfg.scheme is Scheme.RTN:
        return rtn_rows(w, cfg.bits)
    r = kquant_rows(w, cfg)
    return r["codes"], r["scale"], r["offset"], r["zero_point"]


def quantize_tensor(t: TensorF32, cfg: QuantConfig, workers: int = 1) -> QuantizedTensor:
    """Quantize the flattened row-major tensor in independent blocks.

    A trailing partial block is quantized on its own statistics.  ``workers``
    only changes scheduling; the output is identical for any value.
    """
    flat = t.data.astype(np.float64)
    _check_finite(flat)
    b = cfg.block_size
    n_full = flat.size // b
    full = flat[: n_full * b].reshape(n_full, b)

    pieces: list[np.ndarray] = []
    if n_full:
        pieces = np.array_split(full, min(max(workers, 1), n_full))
    tail = flat[n_full * b :]

    if workers > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda p: _quantize_rows(p, cfg), pieces))
    else:
        results = [_quantize_rows(p, cfg) for p in pieces]
    if tail.size:
        results.append(_quantize_rows(tail.reshape(1, -1), cfg))

    codes = np.concatenate([r[0].reshape(-1) for r in results]) if results else np.zeros(0, np.uint8)
    scales = np.concatenate([r[1] for r in results])
    offsets = np.concatenate([r[2] for r in results])
    zps = np.concatenate([r[3] for r in results])
    return QuantizedTensor(t.name, t.shape, cfg.bits, b, scales, offsets, codes, zero_points=zps)


def dequantize_rows(qt: QuantizedTensor, start: int, stop: int) -> np.ndarray:
    """Dequantize flat elements [start, stop) as float32, touching only the blocks involved."""
    idx = np.arange(start, stop) // qt.block_size
    vals = qt.scales[idx].astype(np.float64) * qt.codes[start:stop] + qt.offsets[idx].astype(np.float64)
    return vals.astype(np.float32)


def dequantize_tensor(qt: QuantizedTensor) -> TensorF32:
    return TensorF32(qt.name, qt.shape, dequantize_rows(qt, 0, qt.numel))


# ---------------------------------------------------------------------------
# mixed precision


@dataclass
class MixedPolicy:
    rules: list[tuple[str, int]] = field(default_factory=list)
    default_bits: int = 4

    def __post_init__(self) -> None:
        if self.default_bits not in (4, 8):
            raise PolicyError(f"default_bits must be 4 or 8, got {self.default_bits}")
        for pattern, bits in self.rules:
            _validate_glob(pattern)
            if bits not in (4, 8):
                raise PolicyError(f"rule {pattern!r}: bits must be 4 or 8, got {bits}")

    @classmethod
    def uniform(cls, bits: int) -> "MixedPolicy":
        return cls([], bits)

    @classmethod
    def from_dict(cls, d: dict) -> "MixedPolicy":
        try:
            rules = [(str(r["pattern"]), int(r["bits"])) for r in d.get("rules", [])]
            return cls(rules, int(d.get("default_bits", 4)))
        except (KeyError, TypeError) as e:
            raise PolicyError(f"malformed policy: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "MixedPolicy":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise PolicyError(f"{path}: {e}") from e

    def to_dict(self) -> dict:
        return {"default_bits": self.default_bits, "rules": [{"pattern": p, "bits": b} for p, b in self.rules]}


def _validate_glob(pattern: str) -> None:
    if not pattern:
        raise PolicyError("empty glob pattern")
    depth = 0
    for ch in pattern:
        if ch == "[":
            if depth:
                raise PolicyError(f"nested '[' in glob {pattern!r}")
            depth = 1
        elif ch == "]" and depth:
            depth = 0
    if depth:
        raise PolicyError(f"unterminated '[' in glob {pattern!r}")
    re.compile(fnmatch.translate(pattern))


def boundary_mixed_policy(n_layers: int) -> MixedPolicy:
    """int8 for attention projections everywhere and for the first/last encoder layers; int4 elsewhere."""
    return MixedPolicy(
        rules=[
            ("enc.*.attn.*", 8),
            ("enc.0.*", 8),
            (f"enc.{n_layers - 1}.*", 8),
        ],
        default_bits=4,
    )


def plan_mixed_precision(names: Iterable[str], policy: MixedPolicy) -> dict[str, int]:
    plan = {}
    for name in names:
        bits = policy.default_bits
        for pattern, rule_bits in policy.rules:
            if fnmatch.fnmatchcase(name, pattern):
                bits = rule_bits
                break
        plan[name] = bits
    return plan


def quantize_model(
    container: ModelContainer,
    cfg: QuantConfig,
    policy: MixedPolicy | None = None,
    scope: Callable[[str], bool] = lambda name: False,
    workers: int = 1,
) -> ModelContainer:
    """Quantize the tensors selected by ``scope``; everything else is copied verbatim.

    ``policy`` decides bits per tensor; without one, ``cfg.bits`` is used for all.
    """
    selected = [n for n, t in container.tensors.items() if scope(n) and isinstance(t, TensorF32)]
    if not selected:
        return ModelContainer(dict(container.tensors), dict(container.metadata), container.version)
    policy = policy or MixedPolicy.uniform(cfg.bits)
    plan = plan_mixed_precision(selected, policy)

    out = ModelContainer(metadata=dict(container.metadata), version=container.version)
    for name, t in container.tensors.items():
        if name in plan:
            tcfg = QuantConfig(plan[name], cfg.block_size, cfg.scheme, cfg.candidate_count, cfg.candidate_span)
            out.add(quantize_tensor(t, tcfg, workers=workers))
        else:
            out.add(t)

    hist: dict[str, int] = {}
    for b in plan.values():
        hist[str(b)] = hist.get(str(b), 0) + 1
    out.metadata["quant.scheme"] = cfg.scheme.value
    out.metadata["quant.block_size"] = str(cfg.block_size)
    out.metadata["quant.candidate_count"] = str(cfg.candidate_count)
    out.metadata["quant.candidate_span"] = json.dumps(list(cfg.candidate_span))
    out.metadata["quant.bits_histogram"] = json.dumps(hist, sort_keys=True)
    out.metadata["quant.tensor_bits"] = json.dumps(plan)
    out.metadata["quant.original_payload_bytes"] = str(container_size_bytes(container))
    out.metadata["quant.payload_bytes"] = str(container_size_bytes(out))
    return out


def rtn_affine_error(w, alpha, bits: int) -> float:
    """Weighted error of the plain RTN affine map under importance ``alpha``."""
    blk = rtn_quantize_block(w, bits)
    err = weighted_error_rows(blk.q.astype(np.float64)[None], np.asarray(w, float)[None],
                              np.asarray(alpha, float)[None], np.array([blk.scale]), np.array([blk.offset]))
    return float(err[0])


__all__ = [
    "AffineFit", "KQuantFit", "MixedPolicy", "PolicyError", "QuantBlock", "QuantConfig", "Scheme",
    "dequantize_tensor", "kquant_affine_fit", "kquant_importance", "kquant_quantize_block",
    "boundary_mixed_policy", "plan_mixed_precision", "quantize_model", "quantize_tensor",
    "rtn_affine_error", "rtn_quantize_block",
]

