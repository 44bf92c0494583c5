"""Public architecture shapes of the evaluated models, all at TP=8."""
from __future__ import annotations

from .errors import ConfigurationError
from .wavemodel import LayerSpec

MODELS = {
    "llama-70b": LayerSpec(8192, 28672, 64, 8, 128, 80, name="llama-70b"),
    "qwen2.5-72b": LayerSpec(8192, 29568, 64, 8, 128, 80, name="qwen2.5-72b"),
    "mixtral-8x22b": LayerSpec(6144, 16384, 48, 8, 128, 56, experts=8, top_k=2, name="mixtral-8x22b"),
    "qwen3-235b": LayerSpec(4096, 1536, 64, 4, 128, 94, experts=128, top_k=8, name="qwen3-235b"),
}

# token count at which splitting + overlap is switched on
THRESHOLDS = {
    "llama-70b": 1024,
    "qwen2.5-72b": 1024,
    "mixtral-8x22b": 4096,
    "qwen3-235b": 4096,
}

# default chunked-prefill budget per iteration
CHUNK_SIZES = {
    "llama-70b": 2048,
    "qwen2.5-72b": 2048,
    "mixtral-8x22b": 4096,
    "qwen3-235b": 4096,
}


def model_preset(name: str) -> LayerSpec:
    try:
        return MODELS[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown model preset {name!r}; choose from {sorted(MODELS)}") from None
