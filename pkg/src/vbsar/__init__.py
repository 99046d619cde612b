"""Two-stage variational Bayes for panel SAR models with unrestricted spatial
weights and Dirichlet-Laplace shrinkage."""

__version__ = "0.1.0"

from .dl_prior import DLState, dl_init, dl_prior_precision, dl_signal, dl_update
from .exceptions import (ConfigError, DegenerateSignalError, DomainError, HarnessError, InputError,
                         NumericalError, VBSARError)
from .model import EstimatorConfig, PanelData, SarEstimate, check_stability, estimate_sar
from .simulate import DGPSpec, MCSummary, Model2Params, make_ring_weights, run_monte_carlo
from .special_fns import bessel_k_ratio, gig_moments, ig_reciprocal_moments, log_bessel_k
from .stage1 import Stage1Config, stage1_fit
from .stage2 import Stage2Config, stage2_fit

__all__ = [
    "DLState", "dl_init", "dl_prior_precision", "dl_signal", "dl_update",
    "ConfigError", "DegenerateSignalError", "DomainError", "HarnessError", "InputError",
    "NumericalError", "VBSARError",
    "EstimatorConfig", "PanelData", "SarEstimate", "check_stability", "estimate_sar",
    "DGPSpec", "MCSummary", "Model2Params", "make_ring_weights", "run_monte_carlo",
    "bessel_k_ratio", "gig_moments", "ig_reciprocal_moments", "log_bessel_k",
    "Stage1Config", "stage1_fit", "Stage2Config", "stage2_fit",
]
