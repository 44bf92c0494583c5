"""Simulator for fused AllReduce-RMSNorm, wave-aware token splitting and
compute/communication overlap in tensor-parallel LLM inference."""

from .errors import (
    CalibrationError,
    ConfigurationError,
    ContractError,
    DimensionError,
    NumericError,
    TraceParseError,
    WeaveSimError,
)

__version__ = "0.1.0"
