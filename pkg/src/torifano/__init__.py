"""Toric scalar reduction of the normalized generalized Kahler-Ricci flow.

Submodules: polytope (Delzant data and quadrature), potential (symplectic
potentials and the Legendre transform), geometry (pointwise GK matrices and
curvature), functionals (extended Mabuchi energy), flow (time integration),
cli (batch entry point).
"""

from .errors import (BoundaryContact, ConfigError, ConvexityLoss, Empty,
                     EvaluationFailure, NoConvergence, NotBarycentred,
                     NotDelzant, SingularMatrix, StabilityAbort, TamingFailure,
                     TorifanoError, Unbounded)
from .flow import (FlowConfig, FlowState, ObservableRecord, ObservableSeries,
                   RunResult, flow_rhs, initial_state, load_snapshot,
                   phi_equation_residual, run, step, write_snapshot)
from .functionals import (FunctionalReport, mabuchi_energy,
                          mabuchi_first_variation, mabuchi_second_variation)
from .geometry import (DeformationPair, MetricBlocks, b_norm_sq,
                       chern_laplacian, gen_scalar_curvature, matrix_identity_suite,
                       metric_blocks, poisson_coefficients, ricci_potential,
                       taming_check)
from .polytope import (DelzantPolytope, Label, PolytopeQuadrature,
                       build_polytope, build_quadrature, futaki,
                       normalization_constant, preset_polytope)
from .potential import (InteriorGrid, LegendrePoint, SymplecticPotential,
                        bump_smooth, canonical_potential, eval_u,
                        legendre_involution_check, legendre_solve,
                        polynomial_smooth, variation_sign_convention,
                        zero_smooth)

__version__ = "0.1.0"
