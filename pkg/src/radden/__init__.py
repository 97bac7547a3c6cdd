"""Quantized CNN denoisers for FMCW radar interference mitigation."""

from . import baselines, engine, evaluation, quant, sim, ternary, training

__all__ = [
    "baselines",
    "engine",
    "evaluation",
    "quant",
    "sim",
    "ternary",
    "training",
]

__version__ = "0.1.0"
