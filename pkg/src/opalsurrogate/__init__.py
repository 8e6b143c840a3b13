"""Bayesian neural network surrogate discovery toolkit.

Core pieces: dense networks with Laplace/Kronecker Gaussian posteriors
(:mod:`~opalsurrogate.network`, :mod:`~opalsurrogate.laplace`), hierarchical
evidence and model comparison (:mod:`~opalsurrogate.evidence`), prior-driven
sparsification (:mod:`~opalsurrogate.sparsify`), the category-wise discovery
loop with leave-out validation (:mod:`~opalsurrogate.opal`), and data
handling (:mod:`~opalsurrogate.data`).
"""

from . import data, errors, evidence, laplace, network, opal, serialize, sparsify
from .data import Dataset, Scenario, SliceSpec, Standardizer, generate_synthetic, load_csv
from .evidence import (
    EvidenceRecord,
    HierarchicalConfig,
    ModelRecord,
    fit_hierarchical,
    log_evidence_sigma,
    log_model_evidence,
    model_average_predict,
    plausibilities,
)
from .laplace import (
    InferenceHyperParams,
    LaplacePosterior,
    OptConfig,
    PredictiveDistribution,
    build_posterior,
    compute_kfac,
    layer_covariance,
    log_det_and_trace,
    predict,
    train_map,
)
from .network import (
    Activation,
    ActivationKind,
    Architecture,
    Parameters,
    SparsityMask,
    apply_mask,
    forward,
    grad_neg_log_posterior,
    jacobian,
)
from .opal import (
    IntegrationAxis,
    ObservableSpec,
    OccamCategory,
    OpalConfig,
    ProbeConfig,
    ValidationConfig,
    build_initial_set,
    discover_category_model,
    leave_out_validate,
    metric_cdf,
    metric_dkl,
    observable,
    partition_categories,
    run_opal,
    select_activation,
)
from .sparsify import SparsifyConfig, sweep_threshold, train_map_laplace_prior

__version__ = "0.1.0"
