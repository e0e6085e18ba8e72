"""Simulation and empirical checks for linear parabolic SPDEs driven by Lévy noise on the torus."""

__version__ = "0.1.0"

from .coefficients import (Affine, CoefficientSet, Constant, EllipticityReport, GridSampled, LinearCombination,
                           NoiseAdapted, SeparableTimeSpace, Spatial, TimeProfile, alpha_matrix, check_boundedness,
                           check_coercivity, check_partial_moment, lambda_homotopy, random_admissible_set)
from .config import ExperimentConfig, load_config
from .exceptions import (ConfigError, ContractionError, GridMismatchError, HypothesisViolation, IntegrityError,
                         LevySPDEError, MartingalizationError, QuadratureError, SolverError)
from .field import Field, SpectralField, TorusGrid, l2_norm, sobolev_norm, to_real, to_spectral
from .levy_noise import (DensityCompoundPoisson, FiniteAtoms, LevyTriplet, NoiseFamily, PathRealization, TimeGrid,
                         TruncatedStableLike, replica_seed, sample_path, truncate_jumps)
from .solver import (SolutionPath, SolverConfig, fractional_forcing, homotopy_demo, mild_solution_oracle,
                     solve_linear, solve_linear_batch, solve_localized, solve_picard)
from .verify import (EstimateReport, NormEstimate, bh_norm, bl_l2_norm, check_apriori, check_levy_system,
                     check_quadratic_variation, check_sup_estimate, check_t_independence, convergence_study,
                     fit_order)
