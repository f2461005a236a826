"""Descriptor learning with the robust angular triplet loss."""

from ._ralnet import (
    DescriptorNet,
    FormatError,
    NumericError,
    average_precision,
    fpr95,
    generate_synthetic,
    gradcheck,
    loss,
    loss_surface,
    mine_hard_negatives,
    resize_bicubic,
    set_num_threads,
    similarity_matrix,
    train_synthetic,
)

__all__ = [
    "DescriptorNet",
    "FormatError",
    "NumericError",
    "average_precision",
    "fpr95",
    "generate_synthetic",
    "gradcheck",
    "loss",
    "loss_surface",
    "mine_hard_negatives",
    "resize_bicubic",
    "set_num_threads",
    "similarity_matrix",
    "train_synthetic",
]
