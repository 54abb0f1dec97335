"""Multi-group calibration of model scores by projected correlation descent.

A finite class of test functions defines the guarantee: after calibration,
the empirical correlation between every test function and the residual is
at most alpha. One loop serves distribution de-biasing, hierarchical
prediction-set coverage, segmentation FNR control, and several related
calibration notions via presets.
"""

from .core import (
    apply_predictor,
    find_violation,
    iteration_bound,
    run_gmc,
    run_gmc_split,
    sample_complexity,
    violation,
)
from .errors import GmcError
from .potentials import (
    CoveragePotential,
    FnrPotential,
    QuadraticPotential,
    check_smoothness,
    potential_value,
)
from .projections import (
    BoxSpec,
    SimplexSpec,
    project,
    project_box,
    project_simplex,
    project_simplex_rows,
)
from .types import (
    AuditReport,
    ConstantInit,
    CopyScores,
    Dataset,
    GmcConfig,
    GroupFunction,
    MappingFunctional,
    PredictorTrace,
    Sample,
    TraceStep,
    noise_uniform,
)

__version__ = "0.1.0"

__all__ = [
    "AuditReport",
    "BoxSpec",
    "ConstantInit",
    "CopyScores",
    "CoveragePotential",
    "Dataset",
    "FnrPotential",
    "GmcConfig",
    "GmcError",
    "GroupFunction",
    "MappingFunctional",
    "PredictorTrace",
    "QuadraticPotential",
    "Sample",
    "SimplexSpec",
    "TraceStep",
    "apply_predictor",
    "check_smoothness",
    "find_violation",
    "iteration_bound",
    "noise_uniform",
    "potential_value",
    "project",
    "project_box",
    "project_simplex",
    "project_simplex_rows",
    "run_gmc",
    "run_gmc_split",
    "sample_complexity",
    "violation",
]
