"""Cache-aware streaming transducer at toy scale.

Encoder layers are pre-LN blocks of chunked self-attention, causal depthwise
convolution and a feed-forward net.  In streaming mode each layer keeps

* the last ``conv_kernel - 1`` normalized frames (conv tail), and
* keys/values for the last ``left_context * frames_per_chunk`` positions,

in fixed-size buffers that are overwritten in place every chunk.  The offline
path (:meth:`Transducer.encoder_batch`) runs the whole sequence with a block mask
in which a frame of chunk ``c`` sees chunks ``c - left_context .. c``; the two
paths agree to rounding.

The prediction network is a single LSTM layer and the joiner is
``tanh(enc @ We + dec @ Wd + b) @ Wo + bo`` with the blank logit last.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .kernels import linear, matmul_f32
from .mel import CHUNK_UNIT_S, MelConfig, MelRingState, mel_batch, mel_push_chunk, synthetic_audio
from .quant import dequantize_tensor
from .tensorstore import ModelContainer, QuantizedTensor, TensorF32

LN_EPS = 1e-5


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class StreamingConfig:
    """``(chunk_size, left_context, shift_size)`` with sizes in 80 ms units."""

    chunk_size: int
    left_context: int
    shift_size: int
    hops_per_unit: int = 8

    def __post_init__(self) -> None:
        if self.chunk_size < 1 or self.shift_size < 1 or self.left_context < 0:
            raise ValueError(f"invalid streaming config {self.as_tuple()}")
        if self.chunk_size != self.shift_size:
            raise ValueError("chunk_size must equal shift_size")

    @classmethod
    def parse(cls, text: str, hops_per_unit: int = 8) -> "StreamingConfig":
        parts = [p.strip() for p in text.replace("(", "").replace(")", "").split(",")]
        if len(parts) != 3:
            raise ValueError(f"config must be 'chunk,left,shift', got {text!r}")
        try:
            c, l, s = (int(p) for p in parts)
        except ValueError:
            raise ValueError(f"config must be three integers, got {text!r}") from None
        if c < 1 or s < 1 or l < 1:
            raise ValueError(f"config values must be positive, got {text!r}")
        return cls(c, l, s, hops_per_unit)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.chunk_size, self.left_context, self.shift_size)

    @property
    def frames_per_chunk(self) -> int:
        return self.chunk_size * self.hops_per_unit

    @property
    def cache_frames(self) -> int:
        return self.left_context * self.frames_per_chunk

    @property
    def chunk_duration_s(self) -> float:
        return self.chunk_size * CHUNK_UNIT_S

    @property
    def delay_s(self) -> float:
        return self.chunk_duration_s

    @property
    def history_window_s(self) -> float:
        return self.left_context * self.chunk_size * CHUNK_UNIT_S


@dataclass(frozen=True)
class ToyModelSpec:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    conv_kernel: int = 9
    vocab_size: int = 32
    d_dec: int = 64
    d_joint: int = 64
    ff_mult: int = 4
    n_mels: int = 80
    max_symbols_per_step: int = 10

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.d_model, self.n_heads, self.conv_kernel, self.vocab_size, self.d_dec) < 1:
            raise ValueError("all sizes must be positive")

    @property
    def blank_id(self) -> int:
        return self.vocab_size

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ToyModelSpec":
        return cls(**json.loads(text))

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        d, ff = self.d_model, self.d_model * self.ff_mult
        shapes: dict[str, tuple[int, ...]] = {
            "enc.in_proj.w": (self.n_mels, d),
            "enc.in_proj.b": (d,),
        }
        for i in range(self.n_layers):
            p = f"enc.{i}."
            shapes.update({
                p + "attn_norm.g": (d,), p + "attn_norm.b": (d,),
                p + "attn.q.w": (d, d), p + "attn.k.w": (d, d), p + "attn.v.w": (d, d), p + "attn.o.w": (d, d),
                p + "conv_norm.g": (d,), p + "conv_norm.b": (d,),
                p + "conv.dw.w": (self.conv_kernel, d), p + "conv.pw.w": (d, d),
                p + "ff_norm.g": (d,), p + "ff_norm.b": (d,),
                p + "ff.w1": (d, ff), p + "ff.b1": (ff,), p + "ff.w2": (ff, d), p + "ff.b2": (d,),
            })
        shapes.update({
            "enc.out_norm.g": (d,), "enc.out_norm.b": (d,),
            "dec.embed": (self.vocab_size, self.d_dec),
            "dec.lstm.w_ih": (self.d_dec, 4 * self.d_dec),
            "dec.lstm.w_hh": (self.d_dec, 4 * self.d_dec),
            "dec.lstm.b": (4 * self.d_dec,),
            "joint.enc.w": (d, self.d_joint),
            "joint.dec.w": (self.d_dec, self.d_joint),
            "joint.b": (self.d_joint,),
            "joint.out.w": (self.d_joint, self.vocab_size + 1),
            "joint.out.b": (self.vocab_size + 1,),
        })
        return shapes

    def encoder_linear_names(self) -> list[str]:
        """Encoder weights consumed by matmul; the default quantization scope."""
        names = ["enc.in_proj.w"]
        for i in range(self.n_layers):
            p = f"enc.{i}."
            names += [p + "attn.q.w", p + "attn.k.w", p + "attn.v.w", p + "attn.o.w",
                      p + "conv.pw.w", p + "ff.w1", p + "ff.w2"]
        return names


DEFAULT_VOCAB = ["▁"] + [chr(c) for c in range(ord("a"), ord("z") + 1)] + ["'", "▁the", "▁a", "▁and", "▁of"]


def default_vocab(size: int) -> list[str]:
    if size <= len(DEFAULT_VOCAB):
        return DEFAULT_VOCAB[:size]
    return DEFAULT_VOCAB + [f"<{i}>" for i in range(len(DEFAULT_VOCAB), size)]


def generate_toy_model(
    spec: ToyModelSpec = ToyModelSpec(),
    seed: int = 0,
    mel_cfg: MelConfig = MelConfig(),
    emission_rate: float = 0.15,
    calibration_s: float = 2.0,
) -> ModelContainer:
    """Seeded random weights for ``spec``; spec, vocabulary and seed go in the metadata.

    Purely random weights make a degenerate transducer: the encoder output is
    dominated by a constant spectral offset and the predictor falls into
    re-emission loops.  Three seeded adjustments give it trained-like decoding
    behavior without changing the architecture:

    * ``joint.dec.w`` is fitted so the predictor state after token ``k`` pushes
      the joiner against token ``k`` and toward blank;
    * ``joint.b`` cancels the mean encoder projection on synthetic audio;
    * the blank bias is set so about ``emission_rate`` of those frames emit.
    """
    if spec.n_mels != mel_cfg.n_mels:
        raise ValueError("spec.n_mels must match the mel config")
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    for name, shape in spec.tensor_shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name == "dec.lstm.b":
            arr = 0.1 * rng.standard_normal(shape)
            # short memory: the predictor state mostly reflects the last token
            arr[spec.d_dec : 2 * spec.d_dec] -= 3.0
        elif leaf.startswith("b"):
            arr = 0.1 * rng.standard_normal(shape)
        elif name == "dec.embed":
            arr = rng.standard_normal(shape)
        elif name in ("dec.lstm.w_ih", "joint.out.w"):
            arr = 3.0 * rng.standard_normal(shape) / np.sqrt(shape[0])
        elif name == "joint.enc.w":
            arr = 2.0 * rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        w[name] = arr
    _fit_predictor_projection(w, spec)

    meta = {
        "model.arch": "toy-cache-aware-transducer",
        "model.spec": spec.to_json(),
        "model.vocab": json.dumps(default_vocab(spec.vocab_size)),
        "model.seed": str(seed),
        "model.max_symbols_per_step": str(spec.max_symbols_per_step),
        "model.emission_rate": str(emission_rate),
        "mel.config": json.dumps(mel_cfg.to_dict(), sort_keys=True),
        "mel.dither": "0",
        "mel.normalize": "none",
    }

    def build() -> ModelContainer:
        return ModelContainer.from_tensors([TensorF32.from_array(n, a) for n, a in w.items()], meta)

    model = Transducer(build())
    feats = mel_batch(synthetic_audio(seed, calibration_s, mel_cfg.sample_rate), mel_cfg)
    enc_proj = model.project_encoder(model.encoder_batch(feats))
    w["joint.b"] = -enc_proj.mean(axis=0) + 0.1 * rng.standard_normal(spec.d_joint)
    w["joint.out.b"][spec.blank_id] = 0.0

    model = Transducer(build())
    dec_proj = model.project_decoder(np.zeros(spec.d_dec))
    logits = np.array([model.joint_from_projections(e, dec_proj) for e in enc_proj])
    margin = logits[:, : spec.blank_id].max(axis=1) - logits[:, spec.blank_id]
    w["joint.out.b"][spec.blank_id] = float(np.quantile(margin, 1.0 - emission_rate))
    return build()


def _fit_predictor_projection(w: dict[str, np.ndarray], spec: ToyModelSpec, push: float = 3.0) -> None:
    d = spec.d_dec
    gates = w["dec.embed"] @ w["dec.lstm.w_ih"] + w["dec.lstm.b"]
    c = _sigmoid(gates[:, :d]) * np.tanh(gates[:, 2 * d : 3 * d])
    h = _sigmoid(gates[:, 3 * d :]) * np.tanh(c)  # state after each token from a zero state
    u = w["joint.out.w"] / np.linalg.norm(w["joint.out.w"], axis=0, keepdims=True)
    target = push * (0.5 * u[:, [spec.blank_id]].T - u[:, : spec.vocab_size].T)
    w["joint.dec.w"] = 0.25 * w["joint.dec.w"] + np.linalg.pinv(h) @ target


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int, mask: np.ndarray | None = None) -> np.ndarray:
    tq, d = q.shape
    dh = d // n_heads
    qh = q.reshape(tq, n_heads, dh)
    kh = k.reshape(-1, n_heads, dh)
    vh = v.reshape(-1, n_heads, dh)
    scores = np.einsum("qhd,khd->hqk", qh, kh) / np.sqrt(dh)
    if mask is not None:
        scores = np.where(mask[None], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    return np.einsum("hqk,khd->qhd", p, vh).reshape(tq, d)


@dataclass
class LayerCache:
    k: np.ndarray
    v: np.ndarray
    conv: np.ndarray
    # scratch buffers, allocated once per session
    work_k: np.ndarray = field(repr=False)
    work_v: np.ndarray = field(repr=False)
    work_c: np.ndarray = field(repr=False)


@dataclass
class EncoderCache:
    layers: list[LayerCache]
    positions: np.ndarray  # absolute frame index held by each attention-cache row, -1 if empty
    valid: int = 0
    frames_seen: int = 0

    @classmethod
    def zeros(cls, spec: ToyModelSpec, cfg: StreamingConfig) -> "EncoderCache":
        C, F, d, K = cfg.cache_frames, cfg.frames_per_chunk, spec.d_model, spec.conv_kernel
        layers = [
            LayerCache(
                k=np.zeros((C, d)), v=np.zeros((C, d)), conv=np.zeros((K - 1, d)),
                work_k=np.zeros((C + F, d)), work_v=np.zeros((C + F, d)), work_c=np.zeros((K - 1 + F, d)),
            )
            for _ in range(spec.n_layers)
        ]
        return cls(layers, np.full(C, -1, dtype=np.int64))

    def nbytes(self) -> int:
        n = self.positions.nbytes
        for lc in self.layers:
            n += sum(a.nbytes for a in (lc.k, lc.v, lc.conv, lc.work_k, lc.work_v, lc.work_c))
        return n


@dataclass
class DecoderState:
    h: np.ndarray
    c: np.ndarray
    dec_out: np.ndarray
    last_token: int | None = None

    @classmethod
    def zeros(cls, d_dec: int) -> "DecoderState":
        return cls(np.zeros(d_dec), np.zeros(d_dec), np.zeros(d_dec), None)


class Transducer:
    """Immutable model view over a container; safe to share across sessions."""

    def __init__(self, container: ModelContainer, int_matmul: bool = False) -> None:
        try:
            self.spec = ToyModelSpec.from_json(container.metadata["model.spec"])
        except KeyError:
            raise ModelError("container has no model.spec metadata") from None
        self.container = container
        self.int_matmul = int_matmul
        self.vocab: list[str] = json.loads(container.metadata.get("model.vocab", "null")) or default_vocab(
            self.spec.vocab_size
        )
        mel_meta = container.metadata.get("mel.config")
        self.mel_cfg = MelConfig(**json.loads(mel_meta)) if mel_meta else MelConfig(n_mels=self.spec.n_mels)

        linear_names = set(self.spec.encoder_linear_names()) | {"dec.lstm.w_ih", "dec.lstm.w_hh", "joint.enc.w",
                                                                  "joint.dec.w", "joint.out.w"}
        self._w: dict[str, Any] = {}
        for name, shape in self.spec.tensor_shapes().items():
            if name not in container:
                raise ModelError(f"missing tensor {name!r}")
            t = container[name]
            if tuple(t.shape) != shape:
                raise ModelError(f"{name}: shape {t.shape} does not match spec {shape}")
            if isinstance(t, QuantizedTensor) and name in linear_names:
                self._w[name] = t
            elif isinstance(t, QuantizedTensor):
                self._w[name] = dequantize_tensor(t).array().astype(np.float64)
            else:
                self._w[name] = t.array().astype(np.float64)

    def param(self, name: str) -> np.ndarray:
        return self._w[name]

    def lin(self, x: np.ndarray, name: str) -> np.ndarray:
        return linear(x, self._w[name], self.int_matmul)

    # ------------------------------------------------------------------ encoder

    def _in_proj(self, feats: np.ndarray) -> np.ndarray:
        return self.lin(feats, "enc.in_proj.w") + self._w["enc.in_proj.b"]

    def _conv_and_ff(self, i: int, x: np.ndarray, padded: np.ndarray) -> np.ndarray:
        """Conv module (``padded`` = conv tail ++ normalized frames) then feed-forward."""
        p = f"enc.{i}."
        T = x.shape[0]
        w = self._w[p + "conv.dw.w"]
        conv = np.zeros((T, x.shape[1]))
        for j in range(w.shape[0]):
            conv += w[j] * padded[j : j + T]
        conv = conv * _sigmoid(conv)
        x = x + self.lin(conv, p + "conv.pw.w")
        h = _layer_norm(x, self._w[p + "ff_norm.g"], self._w[p + "ff_norm.b"])
        h = np.maximum(self.lin(h, p + "ff.w1") + self._w[p + "ff.b1"], 0.0)
        return x + self.lin(h, p + "ff.w2") + self._w[p + "ff.b2"]

    def _qkv(self, i: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = f"enc.{i}."
        h = _layer_norm(x, self._w[p + "attn_norm.g"], self._w[p + "attn_norm.b"])
        return self.lin(h, p + "attn.q.w"), self.lin(h, p + "attn.k.w"), self.lin(h, p + "attn.v.w")

    def _conv_input(self, i: int, x: np.ndarray) -> np.ndarray:
        p = f"enc.{i}."
        return _layer_norm(x, self._w[p + "conv_norm.g"], self._w[p + "conv_norm.b"])

    def _out_norm(self, x: np.ndarray) -> np.ndarray:
        return _layer_norm(x, self._w["enc.out_norm.g"], self._w["enc.out_norm.b"])

    def encoder_chunk(self, features: np.ndarray, cache: EncoderCache, cfg: StreamingConfig) -> np.ndarray:
        """Encode one chunk of ``frames_per_chunk`` frames, updating ``cache`` in place."""
        F = cfg.frames_per_chunk
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (F, self.spec.n_mels):
            raise ValueError(f"expected features of shape {(F, self.spec.n_mels)}, got {features.shape}")
        C = cfg.cache_frames
        K1 = self.spec.conv_kernel - 1
        valid = cache.valid
        x = self._in_proj(features)
        for i, lc in enumerate(cache.layers):
            q, k, v = self._qkv(i, x)
            lc.work_k[:C] = lc.k
            lc.work_k[C:] = k
            lc.work_v[:C] = lc.v
            lc.work_v[C:] = v
            att = _attend(q, lc.work_k[C - valid :], lc.work_v[C - valid :], self.spec.n_heads)
            x = x + self.lin(att, f"enc.{i}.attn.o.w")
            lc.k[:] = lc.work_k[F:]
            lc.v[:] = lc.work_v[F:]

            lc.work_c[:K1] = lc.conv
            lc.work_c[K1:] = self._conv_input(i, x)
            x = self._conv_and_ff(i, x, lc.work_c)
            lc.conv[:] = lc.work_c[F:]

        if C:
            new = np.arange(cache.frames_seen, cache.frames_seen + F)
            if F >= C:
                cache.positions[:] = new[-C:]
            else:
                cache.positions[: C - F] = cache.positions[F:]
                cache.positions[C - F :] = new
        cache.valid = min(C, valid + F)
        cache.frames_seen += F
        return self._out_norm(x)

    def chunk_mask(self, T: int, cfg: StreamingConfig) -> np.ndarray:
        chunk = np.arange(T) // cfg.frames_per_chunk
        diff = chunk[:, None] - chunk[None, :]
        return (diff >= 0) & (diff <= cfg.left_context)

    def encoder_batch(self, features: np.ndarray, cfg: StreamingConfig | None = None) -> np.ndarray:
        """Whole-sequence encoder under the chunked attention mask.

        With ``cfg=None`` attention is unrestricted.
        """
        features = np.asarray(features, dtype=np.float64)
        T = features.shape[0]
        if cfg is not None and T % cfg.frames_per_chunk:
            raise ValueError(f"{T} frames is not a multiple of frames_per_chunk={cfg.frames_per_chunk}")
        mask = self.chunk_mask(T, cfg) if cfg is not None else None
        K1 = self.spec.conv_kernel - 1
        x = self._in_proj(features)
        for i in range(self.spec.n_layers):
            q, k, v = self._qkv(i, x)
            x = x + self.lin(_attend(q, k, v, self.spec.n_heads, mask), f"enc.{i}.attn.o.w")
            h = self._conv_input(i, x)
            padded = np.concatenate([np.zeros((K1, h.shape[1])), h])
            x = self._conv_and_ff(i, x, padded)
        return self._out_norm(x)

    # ------------------------------------------------------------------ decoder / joiner

    def decoder_step(self, token: int, state: DecoderState) -> DecoderState:
        if not 0 <= token < self.spec.vocab_size:
            raise ValueError(f"token {token} outside [0, {self.spec.vocab_size})")
        d = self.spec.d_dec
        emb = self._w["dec.embed"][token][None]
        gates = (
            matmul_f32(emb, self._w["dec.lstm.w_ih"])
            + matmul_f32(state.h[None], self._w["dec.lstm.w_hh"])
            + self._w["dec.lstm.b"]
        )[0]
        i_g = _sigmoid(gates[:d])
        f_g = _sigmoid(gates[d : 2 * d])
        g_g = np.tanh(gates[2 * d : 3 * d])
        o_g = _sigmoid(gates[3 * d :])
        c = f_g * state.c + i_g * g_g
        h = o_g * np.tanh(c)
        return DecoderState(h, c, h, token)

    def project_encoder(self, encoded: np.ndarray) -> np.ndarray:
        return matmul_f32(encoded, self._w["joint.enc.w"])

    def project_decoder(self, dec_out: np.ndarray) -> np.ndarray:
        return matmul_f32(np.asarray(dec_out, dtype=np.float64)[None], self._w["joint.dec.w"])[0]

    def joint_from_projections(self, enc_proj: np.ndarray, dec_proj: np.ndarray) -> np.ndarray:
        h = np.tanh(enc_proj + dec_proj + self._w["joint.b"])
        return matmul_f32(h[None], self._w["joint.out.w"])[0] + self._w["joint.out.b"]

    def joiner(self, enc_frame: np.ndarray, dec_out: np.ndarray) -> np.ndarray:
        enc_proj = self.project_encoder(np.asarray(enc_frame, dtype=np.float64)[None])[0]
        return self.joint_from_projections(enc_proj, self.project_decoder(dec_out))

    def detokenize(self, tokens: Sequence[int]) -> str:
        return "".join(self.vocab[t] for t in tokens).replace("▁", " ").strip()


# ---------------------------------------------------------------------- greedy decoding


def greedy_decode(
    n_frames: int,
    joint: Callable[[int, Any], np.ndarray],
    step: Callable[[int, Any], Any],
    state: Any,
    blank_id: int,
    max_symbols: int,
) -> tuple[list[int], Any]:
    """RNNT greedy state machine.

    For every frame, query ``joint(t, state)`` and take the argmax: blank moves
    to the next frame, anything else is emitted and fed to ``step`` while staying
    on the same frame, up to ``max_symbols`` emissions per frame.
    """
    if max_symbols < 1:
        raise ValueError("max_symbols must be >= 1")
    tokens: list[int] = []
    for t in range(n_frames):
        emitted = 0
        while emitted < max_symbols:
            k = int(np.argmax(joint(t, state)))
            if k == blank_id:
                break
            tokens.append(k)
            state = step(k, state)
            emitted += 1
    return tokens, state


def decode_frames(model: Transducer, encoded: np.ndarray, state: DecoderState, max_symbols: int) -> tuple[list[int], DecoderState]:
    enc_proj = model.project_encoder(encoded)
    cache = {"state": None, "proj": None}

    def joint(t: int, st: DecoderState) -> np.ndarray:
        if cache["state"] is not st:
            cache["state"], cache["proj"] = st, model.project_decoder(st.dec_out)
        return model.joint_from_projections(enc_proj[t], cache["proj"])

    return greedy_decode(encoded.shape[0], joint, model.decoder_step, state, model.spec.blank_id, max_symbols)


# ---------------------------------------------------------------------- sessions


@dataclass
class StreamSession:
    model: Transducer
    config: StreamingConfig
    max_symbols_per_step: int
    mel_state: MelRingState
    encoder_cache: EncoderCache
    decoder_state: DecoderState
    transcript: list[int] = field(default_factory=list)
    chunk_timings: list[float] = field(default_factory=list)
    chunk_durations: list[float] = field(default_factory=list)
    flush_time_s: float = 0.0
    _pending: np.ndarray = field(default=None, repr=False)
    _pending_len: int = 0
    chunks_encoded: int = 0
    # when a list, every encoded chunk is appended (for tests and diagnostics)
    encoded_log: list | None = None

    def __post_init__(self) -> None:
        self._pending = np.zeros((self.config.frames_per_chunk, self.model.spec.n_mels))

    @property
    def text(self) -> str:
        return self.model.detokenize(self.transcript)

    def decode(self, encoded: np.ndarray) -> list[int]:
        """Greedy-decode encoder frames, carrying decoder state across calls."""
        tokens, self.decoder_state = decode_frames(self.model, encoded, self.decoder_state, self.max_symbols_per_step)
        self.transcript.extend(tokens)
        return tokens

    def _encode_pending(self) -> list[int]:
        encoded = self.model.encoder_chunk(self._pending, self.encoder_cache, self.config)
        self._pending_len = 0
        self.chunks_encoded += 1
        if self.encoded_log is not None:
            self.encoded_log.append(encoded.copy())
        return self.decode(encoded)

    def push_audio(self, samples: np.ndarray) -> list[int]:
        """Feed hop-aligned audio; encode and decode every chunk it completes."""
        feats = mel_push_chunk(samples, self.mel_state)
        F = self.config.frames_per_chunk
        new: list[int] = []
        pos = 0
        while pos < feats.shape[0]:
            take = min(F - self._pending_len, feats.shape[0] - pos)
            self._pending[self._pending_len : self._pending_len + take] = feats[pos : pos + take]
            self._pending_len += take
            pos += take
            if self._pending_len == F:
                new += self._encode_pending()
        return new

    def flush(self) -> list[int]:
        """Zero-pad and encode any frames still pending at end of stream."""
        if self._pending_len == 0:
            return []
        self._pending[self._pending_len :] = 0.0
        return self._encode_pending()

    def nbytes(self) -> int:
        return self.encoder_cache.nbytes() + self.mel_state.nbytes() + self._pending.nbytes + 3 * 8 * self.model.spec.d_dec


def init_session(model: Transducer, cfg: StreamingConfig, max_symbols_per_step: int | None = None) -> StreamSession:
    if cfg.hops_per_unit != model.mel_cfg.hops_per_unit:
        raise ValueError("streaming config and mel config disagree on frames per 80 ms")
    return StreamSession(
        model=model,
        config=cfg,
        max_symbols_per_step=max_symbols_per_step or model.spec.max_symbols_per_step,
        mel_state=MelRingState(model.mel_cfg),
        encoder_cache=EncoderCache.zeros(model.spec, cfg),
        decoder_state=DecoderState.zeros(model.spec.d_dec),
    )


def pad_to_hop(audio: np.ndarray, hop: int) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    rem = audio.size % hop
    return np.concatenate([audio, np.zeros(hop - rem)]) if rem else audio


def stream_audio(session: StreamSession, audio: np.ndarray) -> list[int]:
    """Run a whole utterance through the session one chunk of audio at a time.

    Each entry of ``session.chunk_timings`` is the wall-clock time of one audio
    chunk through mel, encoder and decoder.  End-of-stream flushing is timed
    separately in ``session.flush_time_s``.
    """
    hop = session.model.mel_cfg.hop
    audio = pad_to_hop(audio, hop)
    step = session.config.frames_per_chunk * hop
    sr = session.model.mel_cfg.sample_rate
    for start in range(0, audio.size, step):
        piece = audio[start : start + step]
        t0 = time.perf_counter()
        session.push_audio(piece)
        session.chunk_timings.append(time.perf_counter() - t0)
        session.chunk_durations.append(piece.size / sr)
    t0 = time.perf_counter()
    session.flush()
    session.flush_time_s += time.perf_counter() - t0
    return list(session.transcript)


def batch_transcribe(model: Transducer, audio: np.ndarray, cfg: StreamingConfig, max_symbols: int | None = None) -> tuple[list[int], np.ndarray]:
    """Offline oracle: batch mel, masked batch encoder, greedy over every frame."""
    audio = pad_to_hop(audio, model.mel_cfg.hop)
    feats = mel_batch(audio, model.mel_cfg)
    F = cfg.frames_per_chunk
    T = -(-feats.shape[0] // F) * F
    feats = np.concatenate([feats, np.zeros((T - feats.shape[0], feats.shape[1]))])
    encoded = model.encoder_batch(feats, cfg)
    tokens, _ = decode_frames(model, encoded, DecoderState.zeros(model.spec.d_dec),
                              max_symbols or model.spec.max_symbols_per_step)
    return tokens, encoded
