"""Modified successive approximations for stochastic recursive optimal control."""

from .adjoint import (FirstOrderAdjoint, SecondOrderAdjoint, empirical_knorm,
                      explicit_p0_oracle, first_order_adjoint, lq_second_order_ode,
                      ode_adjoint_linear, second_order_adjoint, second_order_vanishes,
                      upsilon)
from .benchmarks import (Benchmark, TreeModel, example41, example41_rho,
                         linear_recursive_problem, linrec_desk, lq_desk, lq_problem,
                         tree_backend, tree_batch, tree_bruteforce)
from .bsde import (BackwardPaths, ExactTreeBackend, RegressionBackend, condexp_fit,
                   solve_linear_bsde, solve_state_bsde)
from .errors import (ConfigurationError, EvaluationError, NumericalError,
                     SimulationError)
from .hamiltonian import (HamiltonianPoint, delta_tilde, eval_G, eval_H, eval_H_aug,
                          minimize_H_aug)
from .model import (Bounds, Box, ControlDomain, DerivativeReport, Derivatives,
                    FiniteSet, ProblemSpec, Structure, check_derivatives,
                    domain_contains, enumerate_controls, eval_coefficients,
                    eval_driver)
from .msa import (GapReport, IterationRecord, MsaConfig, MsaResult, RunHints,
                  compute_mu, near_optimality_gap, run_msa)
from .stochastics import (BrownianBatch, ControlField, ForwardPaths, TimeGrid,
                          constant_control, girsanov_weights, random_control,
                          sample_brownian, simulate_forward)

__version__ = "0.1.0"
