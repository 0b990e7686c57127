"""Functional variational inference with CNN-GP priors."""

from ._core import (
    DomainError,
    Experiment,
    NumericalError,
    berhu_log_z0,
    berhu_loss,
    berhu_w,
    builtin_arches,
    equivalent_kernel,
    gaussian_kl,
    logdet,
    logpdf,
    prior_blocks,
    schur_inverse,
    spearman,
)

__all__ = [
    "DomainError",
    "Experiment",
    "NumericalError",
    "berhu_log_z0",
    "berhu_loss",
    "berhu_w",
    "builtin_arches",
    "equivalent_kernel",
    "gaussian_kl",
    "logdet",
    "logpdf",
    "prior_blocks",
    "schur_inverse",
    "spearman",
]
