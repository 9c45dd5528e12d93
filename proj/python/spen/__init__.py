"""Structured prediction energy networks for multi-label classification."""

from ._spen import (
    Model,
    SpenError,
    TrainOutcome,
    block_alignment_null,
    block_alignment_score,
    evaluate,
    hamming_error,
    load_dataset,
    macro_f1,
    save_dataset,
    synthetic,
    train,
)

__all__ = [
    "Model",
    "SpenError",
    "TrainOutcome",
    "block_alignment_null",
    "block_alignment_score",
    "evaluate",
    "hamming_error",
    "load_dataset",
    "macro_f1",
    "save_dataset",
    "synthetic",
    "train",
]
