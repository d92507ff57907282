"""Expected-information-gain estimation under nuisance uncertainty.

Estimators (double-loop Monte Carlo, its double-importance-sampled
variant, and the double-Laplace closed-form variant), pilot-based optimal
sample allocation, and stochastic coordinate design optimization.
"""

from .allocation import (
    Allocation,
    PilotConstants,
    allocate,
    allocate_with_discretization,
    estimate_c3_pilot,
    estimate_constants_pilot,
    estimate_variance_pilot_mc2la,
    verify_allocation,
)
from .builtin import (
    LinearGaussianSpec,
    SyntheticDiscretizedFamily,
    SyntheticDiscretizedSpec,
    analytic_eig_example1,
    analytic_eig_linear_gaussian,
    build_model,
    make_example1,
    make_example1_nonuisance,
    make_pk,
    pk_geometric_design,
)
from .design import DesignProblem, crn_gradient, optimize_design, sweep_design
from .errors import (
    AllocationError,
    ConfigError,
    ForwardModelError,
    MapSolverError,
    NestedEigError,
    OracleUnavailableError,
    PilotError,
)
from .estimators import EigResult, dlmc, dlmc2is, mc2la, run_to_tolerance, substream
from .laplace import (
    LaplaceFit,
    SolverConfig,
    fit_joint_map,
    fit_nuisance_map,
    fit_theta_map,
    laplace_log_density,
    marginalized_log_posterior_unnorm,
    sample_laplace,
)
from .models import (
    Dataset,
    ExperimentModel,
    LognormalFactor,
    NormalFactor,
    PriorSpec,
    UniformFactor,
    jac_phi_fd,
    jac_theta_fd,
    jac_z_fd,
    log_likelihood,
    log_prior_joint,
    residual,
    sample_data,
    sample_prior,
)

__version__ = "0.1.0"
