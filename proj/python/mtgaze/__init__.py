"""Lightweight multitask gaze CNN built on a small C++ core."""

from ._mtgaze import (
    FormatError,
    Model,
    ModelConfig,
    NumericError,
    ShapeError,
    ValidationError,
    angles_to_vector,
    angular_error,
    compare_factorized,
    count_conv,
    count_model,
    effective_rf,
    evaluate,
    generate,
    gradcheck,
    multitask_loss,
    receptive_field,
    train,
    zero_predictor_error,
)

__all__ = [name for name in dir() if not name.startswith("_")]
