"""Finite mixtures of M-quantile regressions for unbalanced longitudinal data."""

__version__ = "0.1.0"

from .design import CovariateRole, DesignBundle, build_design
from .em import EmControls, MixtureFit, em_fit, multi_start
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    MqmixError,
    NoAdmissibleModelError,
    NumericalError,
)
from .inference import CovarianceEstimate, sandwich
from .loss import AlidParams, LossConfig
from .panel import ColumnSchema, PanelDataset, load_csv, summarize, write_csv
from .selection import SelectionReport, sweep
from .simulate import SimScenario, generate, score_fit

__all__ = [
    "__version__",
    "CovariateRole",
    "DesignBundle",
    "build_design",
    "EmControls",
    "MixtureFit",
    "em_fit",
    "multi_start",
    "ConfigError",
    "DataError",
    "DomainError",
    "MqmixError",
    "NoAdmissibleModelError",
    "NumericalError",
    "CovarianceEstimate",
    "sandwich",
    "AlidParams",
    "LossConfig",
    "ColumnSchema",
    "PanelDataset",
    "load_csv",
    "summarize",
    "write_csv",
    "SelectionReport",
    "sweep",
    "SimScenario",
    "generate",
    "score_fit",
]
