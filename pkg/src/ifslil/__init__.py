"""Perturbed iterated-function-system Markov chains: assumption audit, simulation,
coupling, corrector estimation and law-of-the-iterated-logarithm diagnostics."""
from .audit import AuditReport, audit, estimate_a_j, estimate_c
from .corrector import (CorrectorEstimate, MartingaleDecomposition, chi_lipschitz_check,
                        estimate_chi, estimate_g_mean, fit_corrector, martingale_decompose,
                        martingale_drift_test)
from .coupling import (CoupledState, DecayFit, DegenerateFitError, coupled_step,
                       coupled_trajectory, fit_decay, fm_distance_curve, overlap_mass)
from .lil import (LilReport, PiecewisePath, SigmaEstimate, build_eta_path, build_theta_path,
                  clt_check, heyde_scott_sums, lil_report, quadratic_variation_curve,
                  sigma2_green_kubo, sigma2_sn_over_n, sigma2_stationary, strassen_distance)
from .model import DomainError, ModelDefinitionError, ModelSpec, NoiseSpec, ObservableSpec
from .oracle import (DiscreteKernel, discretize, embed_kernel_as_model, exact_chi,
                     exact_green_kubo, exact_sigma2, exact_stationary, kernel_observable)
from .registry import builtin_model, builtin_names
from .rng import SeededStream
from .simulator import moment_curve, sample_t, simulate, stationary_samples, step

__version__ = "0.1.0"
