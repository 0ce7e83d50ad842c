"""Weight-only quantization toolkit for mixture-of-experts transformers."""

from .types import Checkpoint, Entry, Granularity, LayerGroup, QuantizedTensor, Scheme

__all__ = ["Checkpoint", "Entry", "Granularity", "LayerGroup", "QuantizedTensor", "Scheme"]
__version__ = "0.1.0"
