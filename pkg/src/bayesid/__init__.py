"""Kernel-regularized identification of linear systems.

Modules: ``model`` (FIR regression, least squares, order selection),
``kernels`` (prior covariances), ``bayes`` (posterior mean, evidence,
empirical Bayes), ``compound`` (shrinkage and risk), ``structure``
(Hankel, nuclear norm, stable-Hankel prior, ARD) and ``bench`` (Monte Carlo
harnesses used by the ``bayesid`` command).
"""
from .bayes import (Estimate, EvidenceProblem, OptimizerConfig, Sigma2Policy, degrees_of_freedom, empirical_bayes,
                    estimate_noise_variance, excess_degrees_of_freedom, log_marginal_likelihood, posterior_mean)
from .kernels import Family, KernelMatrix, KernelSpec, TCFamily, family_from_name, make_kernel
from .model import (FirRegression, FitReport, Handling, IODataset, ImpulseResponse, build_fir_regression, fit_metrics,
                    least_squares, order_selection_baseline, simulate_oe)

__version__ = "0.1.0"
