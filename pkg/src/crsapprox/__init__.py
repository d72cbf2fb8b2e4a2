"""Approximate matrix products and convolutions by column-row sampling,
with the estimator theory needed to check them and a small NumPy training
stack that counts the multiply-accumulates sampling saves."""

from .approx import (
    CorrectionTerms,
    ErrorReport,
    approx_conv2d,
    approx_matmul,
    conv_expected_error,
    conv_variance_element,
    correction_terms,
    matmul_error_bound,
    normalized_error,
)
from .sampling import (
    Policy,
    SamplingError,
    SamplingPlan,
    conv_nps_distribution,
    conv_optimal_distribution,
    draw_coupled_indices,
    draw_plan,
    plan_from_indices,
    nps_distribution,
    topk_plan,
)
from .tensor import (
    DomainError,
    ShapeError,
    channel_norms,
    column_row_norms,
    conv2d_exact,
    conv2d_reference,
    frobenius_norm,
    make_rng,
    matmul_exact,
    matmul_reference,
)

__version__ = "0.1.0"
