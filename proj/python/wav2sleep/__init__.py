"""Sleep staging from any subset of ECG, PPG, ABD and THX signals."""

from ._core import (
    ConfigError,
    DataError,
    NumericalError,
    accuracy,
    evaluate,
    gradcheck,
    infer,
    kappa,
    preset,
    synth,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "NumericalError",
    "accuracy",
    "evaluate",
    "gradcheck",
    "infer",
    "kappa",
    "preset",
    "synth",
    "train",
]
