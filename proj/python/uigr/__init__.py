"""Unified interactive garment retrieval: corpus synthesis, training, evaluation and serving."""

from ._uigr import (
    ConfigError,
    IntegrityError,
    IoError,
    NotFoundError,
    NumericError,
    ParseError,
    Service,
    ShapeError,
    UigrError,
    UsageError,
    ablate,
    average_precision,
    bbc_loss,
    build_dataset,
    evaluate,
    export_embeddings,
    gen_corpus,
    load_run_config,
    lr_at,
    recall_at_k,
    train,
)

__all__ = [
    "ConfigError",
    "IntegrityError",
    "IoError",
    "NotFoundError",
    "NumericError",
    "ParseError",
    "Service",
    "ShapeError",
    "UigrError",
    "UsageError",
    "ablate",
    "average_precision",
    "bbc_loss",
    "build_dataset",
    "evaluate",
    "export_embeddings",
    "gen_corpus",
    "load_run_config",
    "lr_at",
    "recall_at_k",
    "train",
]
