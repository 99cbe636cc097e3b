"""Monte Carlo toolkit for stochastic control problems whose noise is a
martingale field: forward simulation, adjoint BSDE regression, maximum
principle checks and a linear-quadratic oracle."""

__version__ = "0.1.0"

from .errors import ConfigError, InputError, SimulationError, SmpError, SolverError  # noqa: E402
from .field import MartingaleField, SigmaFactor, local_characteristic  # noqa: E402
from .forward import ControlLaw, PathBundle, TimeGrid, simulate_state, simulate_variational  # noqa: E402
from .adjoint import AdjointTriple, RegressionBasis, duality_gap, solve_adjoint  # noqa: E402
from .principle import ControlProblem, CostSpec, hamiltonian, hamiltonian_u  # noqa: E402
from .lq import LQSpec, riccati_oracle  # noqa: E402
