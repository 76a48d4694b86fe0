"""Malware triage pipeline: bytes -> RGB image -> two-stage classifier cascade."""

from ._core import (
    Cascade,
    LmcError,
    bytes_roundtrip,
    bytes_to_image,
    split_dataset,
    synth_dataset,
    token_schedule,
    train_stage1,
    train_stage2,
)

__all__ = [
    "Cascade",
    "LmcError",
    "bytes_roundtrip",
    "bytes_to_image",
    "split_dataset",
    "synth_dataset",
    "token_schedule",
    "train_stage1",
    "train_stage2",
]
