"""American-style options on diffusions: variational-inequality solver, independent
Snell-envelope engines, and diagnostics for the hypotheses under which the two agree.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ConvergenceError, GridError, MismatchError, ModelError,
                     NonFiniteStateError, SnellVIError)
from .model import (DiffusionModel, ModelConfig, PayoffSpec, SpaceTimeGrid, apply_generator, build_model,
                    build_payoff, build_stencil, call_payoff, diffusion_matrix, make_grid, put_payoff)
from .sde import (DiscountPath, FirstVariationFlow, PathBatch, discount_factors, first_variation,
                  iter_path_chunks, simulate_paths)
from .vi import (RegionMask, RegionPair, SolverParams, ValueSurface, complementarity_residual,
                 extract_regions, solve_backward)
from .snell import (AnalyticValue, PriceEstimate, RegionRule, RegressionRule, StoppingRule, chain_dp,
                    evaluate_stopping_rule, lsm_price, martingale_integrand_check, supermartingale_check)
from .diagnostics import (hormander_rank, malliavin_covariance, nondegeneracy_statistic, ou_martingale_check,
                          ou_regularize, tanaka_check)
from .density import estimate_density, positivity_set
from .harness import JobConfig, VerificationReport, load_job_config, verify_equivalence
