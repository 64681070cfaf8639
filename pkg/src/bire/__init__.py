"""Bilinear random effects regression for imbalanced binary response.

Fits per-user and per-item random effects (biases plus latent factors)
whose priors are regressions on covariates, via Monte Carlo EM with a
Gibbs-sampling E-step.  Two E-step flavours are provided: a variational
Gaussian approximation of the logistic likelihood, and exact adaptive
rejection sampling.  Large datasets are handled by partitioned fitting
with ensemble averaging of the random effects.
"""

from .baselines import (
    FeatOnlyConfig,
    FeatOnlyModel,
    SgdModel,
    category_profile,
    fit_feat_only,
    fit_feat_only_partitioned,
    fit_sgd,
)
from .errors import (
    BireError,
    ContractViolation,
    DataError,
    DivergenceError,
    FitError,
    ModeNotStraddled,
    ModelFormatError,
    RejectionLimitError,
)
from .eval import auc, replay_score
from .gibbs import EStepConfig, PseudoResponse, XiTable, center, run_estep
from .io import (
    FeatureTable,
    ModelFile,
    Triple,
    build_dataset,
    load_features,
    load_model,
    load_triples,
    prepare_movielens,
    save_model,
    write_features,
    write_triples,
)
from .mcem import FitSchedule, TraceEntry, fit_single_partition
from .model import (
    complete_data_log_likelihood,
    generate_synthetic,
    log_odds,
    predict_probability,
)
from .mstep import (
    enforce_ordered_variances,
    fit_f_logistic,
    fit_prior_regression,
    run_mstep,
)
from .parallel import (
    EnsembleConfig,
    PartitionPlan,
    PartitionResult,
    RunReport,
    Shard,
    average_theta,
    combine_delta,
    fit_ensemble,
    get_partition_number,
    partition_dataset,
    train_run,
)
from .types import (
    Dataset,
    Hyperparams,
    LatentState,
    Observation,
    SufficientStats,
    SyntheticTruth,
    make_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "BireError", "ContractViolation", "DataError", "ModelFormatError",
    "ModeNotStraddled", "RejectionLimitError", "FitError", "DivergenceError",
    "Observation", "Dataset", "Hyperparams", "LatentState",
    "SufficientStats", "SyntheticTruth", "make_dataset",
    "log_odds", "predict_probability", "complete_data_log_likelihood",
    "generate_synthetic",
    "EStepConfig", "XiTable", "PseudoResponse", "run_estep", "center",
    "fit_prior_regression", "fit_f_logistic", "run_mstep",
    "enforce_ordered_variances",
    "FitSchedule", "TraceEntry", "fit_single_partition",
    "PartitionPlan", "Shard", "PartitionResult", "EnsembleConfig",
    "RunReport", "get_partition_number", "partition_dataset", "train_run",
    "average_theta", "combine_delta", "fit_ensemble",
    "auc", "replay_score",
    "FeatOnlyConfig", "FeatOnlyModel", "fit_feat_only",
    "fit_feat_only_partitioned", "SgdModel", "fit_sgd", "category_profile",
    "Triple", "FeatureTable", "ModelFile", "load_triples", "load_features",
    "build_dataset", "prepare_movielens", "load_model", "save_model",
    "write_triples", "write_features",
    "__version__",
]
