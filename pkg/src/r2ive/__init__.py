"""Robust IV estimation with many candidate instruments of unknown relevance and validity."""

from .data import CenteredDataset, CsvSchema, Dataset, load_csv, residualize, write_csv
from .elasticnet import fit_elastic_net, select_invalid
from .errors import (CollinearityError, DegenerateFirstStageError, DimensionError, IdentificationWarning,
                     InputError, ParseError, R2iveError, SchemaError, SingularDesignError, TuningError)
from .estimator import (ALL_TAGS, BaselineResult, R2iveConfig, R2iveResult, annihilator_transform, baselines,
                        beta_post, r2ive_fit, variance)
from .grouplasso import fit_group_lasso, tune_first_stage
from .simulation import PRESETS, SimConfig, SimulationReport, format_report, generate_dataset, run_monte_carlo
from .splines import SplineSpec, assemble_design

__version__ = "0.1.0"
