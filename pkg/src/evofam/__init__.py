"""Fundamental solutions of non-autonomous second-order wave problems at
finite sine-Galerkin truncation, their first-order reduction, bounded
perturbations, and machine-checkable residual reports."""

from .core import (
    DEFAULT_SEED,
    FORMAT_VERSION,
    AlphaViolation,
    BetaProfile,
    CoefficientFamily,
    ConfigError,
    ProductVector,
    RunSpec,
    Space,
    SpectralVector,
    TimeGrid,
    TimeProfile,
    Tolerances,
    norm,
    parse_config,
    serialize_config,
    spec_from_mapping,
)
from .fundsol import FundamentalSolutionField
from .oscillator import OscillatorSolution, solve_mode
from .perturbation import PerturbedPropagatorField, assemble_B, direct_oracle, solve_volterra
from .report import InvariantReport
from .verify import run_full_suite

__version__ = "0.1.0"
