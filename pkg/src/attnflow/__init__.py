"""Particle dynamics of self-attention on spheres: simulation and analysis."""
from ._accel import USE_NUMBA, backend_name
from .analysis import (ClusterSummary, PairCorrelation, PhaseGrid, RateFit, cluster_summary,
                       cluster_timeline, consensus_residual, deviation_vs_dimension,
                       empirical_boundary, empirical_phase_diagram, fit_exponential_rate,
                       fourier_coefficients_hbeta, gram_histogram, metastable_plateaus,
                       pair_correlation_circle, phase_curve_infty)
from .dynamics import Coupling, ModelSpec, TieRule, Variant, velocity
from .energy import (Classification, LandscapeReport, classify_critical_point, design_test,
                     dissipation_rate, g_function, gradient_standard, interaction_energy,
                     tau_star)
from .geometry import (Configuration, DomainError, HemisphereWitness, alpha_clustered, gram,
                       hemisphere_fraction, hemisphere_witness, sample_orthonormal,
                       sample_uniform, wendel_fraction, wendel_probability)
from .integrate import (IntegratorConfig, Retraction, ScalarCurve, Scheme, StepSizeWarning,
                        Trajectory, __version__, integrate, integrate_gamma, integrate_with_noise,
                        load_trajectory, save_trajectory, solve_gamma_hitting_time,
                        theoretical_deviation_bound)
