"""Matmul kernels over full-precision and block-quantized weights.

Weights are ``(K, N)`` row-major and ``y = x @ W``.  All kernels accumulate each
output element sequentially over ``k = 0 .. K-1`` in float64, so results do not
depend on batch size, tiling, or thread count.
"""

from __future__ import annotations

import numpy as np

from .quant import dequantize_rows
from .tensorstore import QuantizedTensor, TensorF32

# rows of W dequantized at a time by matmul_nbits
TILE_ELEMENTS = 4096


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"activations must be 2-D, got shape {x.shape}")
    return x


def _weight_shape(w) -> tuple[int, int]:
    if len(w.shape) != 2:
        raise ValueError(f"{w.name}: weights must be 2-D, got {w.shape}")
    return w.shape[0], w.shape[1]


def _accumulate(x: np.ndarray, w_rows: np.ndarray, k0: int, out: np.ndarray, tmp: np.ndarray) -> None:
    for i in range(w_rows.shape[0]):
        np.multiply(x[:, k0 + i, None], w_rows[i], out=tmp)
        out += tmp


def matmul_f32(x, w: TensorF32 | np.ndarray) -> np.ndarray:
    x = _as_2d(x)
    wa = np.asarray(w.array() if isinstance(w, TensorF32) else w, dtype=np.float64)
    if wa.ndim != 2 or x.shape[1] != wa.shape[0]:
        raise ValueError(f"shape mismatch: {x.shape} @ {wa.shape}")
    out = np.zeros((x.shape[0], wa.shape[1]))
    tmp = np.empty_like(out)
    _accumulate(x, wa, 0, out, tmp)
    return out


def matmul_nbits(x, qw: QuantizedTensor) -> np.ndarray:
    """``x @ dequantize(qw)`` with block-wise dequantization of row tiles of ``qw``."""
    x = _as_2d(x)
    K, N = _weight_shape(qw)
    if x.shape[1] != K:
        raise ValueError(f"shape mismatch: {x.shape} @ {qw.shape}")
    out = np.zeros((x.shape[0], N))
    tmp = np.empty_like(out)
    rows_per_tile = max(1, TILE_ELEMENTS // N)
    for k0 in range(0, K, rows_per_tile):
        k1 = min(K, k0 + rows_per_tile)
        tile = dequantize_rows(qw, k0 * N, k1 * N).reshape(k1 - k0, N).astype(np.float64)
        _accumulate(x, tile, k0, out, tmp)
    return out


def quantize_activations(x: np.ndarray, bits: int = 8) -> tuple[np.ndarray, float, int]:
    """Per-tensor asymmetric RTN. Returns (codes, scale, zero_point)."""
    qmax = (1 << bits) - 1
    lo = min(float(x.min()), 0.0) if x.size else 0.0
    hi = max(float(x.max()), 0.0) if x.size else 0.0
    scale = (hi - lo) / qmax
    if scale == 0:
        return np.zeros(x.shape, np.int64), 1.0, 0
    zp = int(np.rint(-lo / scale))
    q = np.clip(np.rint(x / scale + zp), 0, qmax).astype(np.int64)
    return q, scale, zp


def requantize_columns(qw: QuantizedTensor, bits: int = 8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-output-column asymmetric integer weights from a block-quantized tensor.

    Returns (codes (K, N) int64, scale (N,), zero_point (N,)).
    """
    K, N = _weight_shape(qw)
    w = dequantize_rows(qw, 0, qw.numel).reshape(K, N).astype(np.float64)
    qmax = (1 << bits) - 1
    lo = np.minimum(w.min(axis=0), 0.0)
    hi = np.maximum(w.max(axis=0), 0.0)
    scale = (hi - lo) / qmax
    scale = np.where(scale == 0, 1.0, scale)
    zp = np.rint(-lo / scale)
    q = np.clip(np.rint(w / scale + zp), 0, qmax).astype(np.int64)
    return q, scale, zp.astype(np.int64)


def matmul_integer(x, qw: QuantizedTensor, act_bits: int = 8, weight_bits: int = 8) -> np.ndarray:
    """Integer-domain product: quantized activations times integer weights, one rescale.

    Activations are quantized per tensor; the block-quantized weights are
    re-expressed as per-column integers so the inner product is a pure integer
    sum.  No accuracy contract: this is the lossy path.
    """
    x = _as_2d(x)
    K, N = _weight_shape(qw)
    if x.shape[1] != K:
        raise ValueError(f"shape mismatch: {x.shape} @ {qw.shape}")
    xq, sx, zx = quantize_activations(x, act_bits)
    wq, sw, zw = requantize_columns(qw, weight_bits)
    xc = xq - zx
    wc = wq - zw[None, :]
    acc = np.zeros((x.shape[0], N), np.int64)
    for k in range(K):
        acc += xc[:, k, None] * wc[k]
    return acc.astype(np.float64) * (sx * sw[None, :])


def linear(x, w, int_matmul: bool = False) -> np.ndarray:
    """Dispatch on weight dtype."""
    if isinstance(w, QuantizedTensor):
        return matmul_integer(x, w) if int_matmul else matmul_nbits(x, w)
    return matmul_f32(x, w)
