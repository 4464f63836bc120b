"""Python bindings for the BiPer binary-network toolkit."""

from ._core import (
    binarize_weights,
    binary_linear,
    biper_binarize,
    biper_surrogate_grad,
    cosine_lr,
    empirical_qe,
    find_qe_maximum,
    fit_laplace,
    gamma_optimal,
    monte_carlo_qe,
    pack,
    pdf,
    pdf_mass,
    qe_asymptote,
    qe_closed_form,
    qe_optimal_product,
    sign_binarize,
    xnor_dot,
)

__all__ = [
    "binarize_weights",
    "binary_linear",
    "biper_binarize",
    "biper_surrogate_grad",
    "cosine_lr",
    "empirical_qe",
    "find_qe_maximum",
    "fit_laplace",
    "gamma_optimal",
    "monte_carlo_qe",
    "pack",
    "pdf",
    "pdf_mass",
    "qe_asymptote",
    "qe_closed_form",
    "qe_optimal_product",
    "sign_binarize",
    "xnor_dot",
]
