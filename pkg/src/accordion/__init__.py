"""Adaptive gradient-communication scheduling over a simulated data-parallel SGD loop."""

from .compressor import CompressedMessage, CompressorState, Level, compress, decompress, float_count
from .controller import AccordionConfig, AccordionState, decide, end_of_epoch, initial_level
from .simulator import MetricsRow, TrainConfig, lr_schedule, run

__version__ = "0.1.0"

__all__ = [
    "AccordionConfig",
    "AccordionState",
    "CompressedMessage",
    "CompressorState",
    "Level",
    "MetricsRow",
    "TrainConfig",
    "compress",
    "decide",
    "decompress",
    "end_of_epoch",
    "float_count",
    "initial_level",
    "lr_schedule",
    "run",
]
