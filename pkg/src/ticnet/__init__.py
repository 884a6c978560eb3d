"""Takeuchi's information criterion for small fully connected softmax networks."""

from .curvature import (
    BlockDiagMatrix,
    DenseSymMatrix,
    DiagVector,
    Representation,
    ResourceCapError,
    fisher_exact,
    fisher_mc,
    ggn,
    grad_covariance,
    kernel_drift,
    ntk_gram,
)
from .experiments import (
    CorrelationTriple,
    HpSpace,
    SweepResult,
    correlations,
    generalization_gap,
    loocv_estimate,
    make_blobs,
    run_sweep,
)
from .grad import gnvp, grad, hvp, per_sample_grads
from .kernels import get_backend, set_backend
from .network import (
    Activation,
    DimensionError,
    LabeledDataset,
    NetworkSpec,
    ParamVector,
    forward,
    init_params,
    loss,
    mean_loss,
)
from .sha import ShaConfig, TrialRecord, compare_pruning, run_sha
from .tic import (
    CholeskyError,
    TicConfig,
    TicReport,
    bias_block,
    bias_diag,
    bias_exact,
    bias_lower_bound,
    hutchinson_trace,
    tic_report,
)
from .train import TrainConfig, Trainer, train

__version__ = "0.1.0"
