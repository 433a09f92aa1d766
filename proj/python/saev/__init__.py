"""Sparse autoencoders over vision transformer activations."""

from ._saev import (
    ActivationStore,
    ArgumentError,
    FormatError,
    IoError,
    Sae,
    dictionary_recovery,
    gen_world,
    load_sae,
    miou,
    top_exemplars,
    train,
    upsample_bilinear,
    warmup_value,
    write_shard,
)

__all__ = [
    "ActivationStore",
    "ArgumentError",
    "FormatError",
    "IoError",
    "Sae",
    "dictionary_recovery",
    "gen_world",
    "load_sae",
    "miou",
    "top_exemplars",
    "train",
    "upsample_bilinear",
    "warmup_value",
    "write_shard",
]
