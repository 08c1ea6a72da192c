"""Python bindings for the rcalign toy sequence-to-sequence library."""

from ._core import (
    CapabilityError,
    ConfigError,
    Corpus,
    FormatError,
    Model,
    RcAlignError,
    alignment_defects,
    gen_corpus,
    load_corpus,
    load_model,
    mechanism_names,
    new_model,
    quantize_duration,
    rc_recursion,
    spearman,
    to_pgm,
    to_ppm,
)

__all__ = [
    "CapabilityError",
    "ConfigError",
    "Corpus",
    "FormatError",
    "Model",
    "RcAlignError",
    "alignment_defects",
    "gen_corpus",
    "load_corpus",
    "load_model",
    "mechanism_names",
    "new_model",
    "quantize_duration",
    "rc_recursion",
    "spearman",
    "to_pgm",
    "to_ppm",
]
