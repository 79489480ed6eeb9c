"""Bilinear generalized approximate message passing.

Inference for Z = A @ X observed entrywise through a separable likelihood,
with factor priors on A and X.  The package covers the damped message-passing
engine, cheap scalar-variance specializations, EM hyperparameter tuning, rank
selection, and ready-made solvers for matrix completion, robust PCA, and
dictionary learning.
"""

from .channels import (
    BernoulliGaussianPrior,
    GaussianMixtureLikelihood,
    GaussianPrior,
    LaplacianLikelihood,
    PiawgnLikelihood,
    RowBlockPrior,
    residual_transform,
)

__version__ = "0.1.0"
