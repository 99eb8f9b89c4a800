"""Low-rank Gaussian image models: densities, sampling, training and edits."""

from ._core import (
    DegenerateInputError,
    DimensionError,
    FormatError,
    LimitExceededError,
    LowRankGaussian,
    Model,
    NumericalError,
    condition_on_edit,
    conditioned_image,
    entropy,
    entropy_grad,
    log_prob,
    log_prob_grad,
    logdet,
    marginal_variance,
    principal_components,
    run_cli,
    sample,
    scale_components,
    scaled_sample,
    slerp,
    slerp_interpolate,
    synthetic_blobs,
)

__all__ = [name for name in dir() if not name.startswith("_")]
