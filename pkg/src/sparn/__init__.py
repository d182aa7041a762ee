"""Sparse autoregressive networks for high-dimensional density estimation.

L1-penalized per-dimension conditionals trained independently by coordinate
descent, EM-trained mixtures with untied / tied / automatic parameter
sharing, and a sequence-of-mixtures model whose interleaved latent variables
keep the likelihood exact.
"""

from .arn import (
    AutoregressiveNet,
    GaussianConditional,
    LogisticConditional,
    fit_arn,
    loglik_arn,
    sample_arn,
)
from .data import (
    Dataset,
    EncodingError,
    EncodingMeta,
    ParseError,
    decode_binary,
    encode_binary,
    load_matrix,
    save_matrix,
    standardize,
)
from .mixture import (
    DimParams,
    MixtureModel,
    component_grid,
    em_fit,
    init_product_mixture,
    loglik_mixture,
    penalized_mixture_objective,
    sample_mixture,
)
from .seqmix import (
    GatedBlock,
    Partition,
    SequenceModel,
    fit_sequence,
    grid_partition,
    infer_posterior,
    loglik_sequence,
    sample_sequence,
)
from .serialize import SerializationError, load_model, save_model
from .solvers import (
    ConvergenceWarning,
    SolverConfig,
    SparseWeights,
    fit_auto_shared,
    fit_linear_l1,
    fit_logistic_l1,
    fit_multiclass_gate,
    lambda_grid,
    lambda_max,
    linear_kkt_violation,
    linear_objective,
    logistic_kkt_violation,
    logistic_objective,
    shared_objective,
    soft_threshold,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
