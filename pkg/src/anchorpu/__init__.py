"""Binary phenotype models from anchor-positive and unlabeled records.

A record is either anchor-positive (a definitive case) or unlabeled (an
unknown mixture of cases and controls).  When the anchor's sensitivity is
independent of the model covariates, the case-probability model, the anchor
sensitivity, and the phenotype prevalence are all identifiable from the
observed data alone, and calibration and predictive accuracy can be
assessed internally, without any labeled validation set.

Main entry points: :class:`Dataset` / :func:`fit` for estimation,
:func:`calibration_table` / :func:`accuracy` / :func:`bootstrap_se` /
:func:`cross_validate` for internal validation, the :mod:`~anchorpu.simulation`
module for replicated synthetic experiments, and the ``anchorpu`` command
line tool.
"""

__version__ = "0.1.0"

from .diagnostics import (
    AccuracyReport,
    AccuracySE,
    CalibrationTable,
    accuracy,
    bootstrap_se,
    calibration_table,
    cross_validate,
)
from .estimation import FitConfig, FitResult, default_init, estimate_prevalence, fit
from .ingest import PreprocessReport, apply_transforms, ingest, write_dataset_csv
from .model import (
    DataError,
    Dataset,
    ModelParams,
    log_likelihood,
    log_likelihood_gradient,
    predict_prob,
    sigmoid,
)
from .simulation import SimDesign, SimSummary, generate, run_experiment
from .stepwise import SelectionResult, stepwise_select, wald_p_values

__all__ = [
    "__version__",
    "AccuracyReport",
    "AccuracySE",
    "CalibrationTable",
    "DataError",
    "Dataset",
    "FitConfig",
    "FitResult",
    "ModelParams",
    "PreprocessReport",
    "SelectionResult",
    "SimDesign",
    "SimSummary",
    "accuracy",
    "apply_transforms",
    "bootstrap_se",
    "calibration_table",
    "cross_validate",
    "default_init",
    "estimate_prevalence",
    "fit",
    "generate",
    "ingest",
    "log_likelihood",
    "log_likelihood_gradient",
    "predict_prob",
    "run_experiment",
    "sigmoid",
    "stepwise_select",
    "wald_p_values",
    "write_dataset_csv",
]
