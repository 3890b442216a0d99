"""Edge streaming ASR toolkit: block quantization, quantized kernels, a toy
cache-aware streaming transducer, and evaluation metrics."""

from .evalkit import bsf, effective_latency, rtfx, streaming_wer, wer
from .quant import QuantConfig, Scheme, quantize_model, quantize_tensor
from .tensorstore import ModelContainer, QuantizedTensor, TensorF32, read_container, write_container
from .transducer import StreamingConfig, Transducer, generate_toy_model, init_session, stream_audio

__version__ = "0.1.0"

__all__ = [
    "ModelContainer", "QuantConfig", "QuantizedTensor", "Scheme", "StreamingConfig", "TensorF32",
    "Transducer", "bsf", "effective_latency", "generate_toy_model", "init_session", "quantize_model",
    "quantize_tensor", "read_container", "rtfx", "stream_audio", "streaming_wer", "wer",
    "write_container",
]
