"""ergwalk: velocity laboratory for transient walks and birth-death
processes in random environments."""

from .bdp import (EventPath, LadderStats, SkeletonSeries, estimate_velocity_bdp,
                  extract_skeleton, h_consistency, ladder_stats, simulate_bdp,
                  skeleton_tail_check, small_h_rates)
from .environments import (ConditionReport, EnvSpec, EnvironmentEnsemble,
                           RwreSiteLaw, SiteRates, check_nonexplosion,
                           embedded_jump_probs, make_law, sample_environment,
                           shift, validate_condition_B, validate_condition_C)
from .lyapunov import (Classification, CompanionMatrix, LyapunovSpectrum,
                       build_A, classify, lyapunov_spectrum)
from .reporting import VelocityReport
from .rwre import (HittingRecord, PiVector, WalkTrajectory,
                   estimate_velocity_rwre, hitting_time_T, local_drift,
                   martingale_residual, phi_pi_solve, run_walk,
                   velocity_corollary)
from .velocity2 import (CoefficientBundle, ExitProbs, FValues,
                        VelocityDecomposition, coefficient_bundle, d_omega,
                        exit_probs_finite, exit_probs_recursion,
                        expected_occupation, f_values, pi_omega,
                        velocity_decomposition, velocity_theorem51)

__version__ = "0.1.0"
