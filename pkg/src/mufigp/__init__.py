"""Multi-fidelity Gaussian-process surrogates.

Exact GPs, linear autoregressive co-kriging, stacked nonlinear
autoregression, sparse variational deep GPs, max-variance adaptive sampling
and post-hoc uncertainty calibration, plus a benchmark harness over
closed-form test problems.
"""

from .adaptivity import AdaptConfig, adapt_loop
from .ar1 import Ar1Chain, fit_ar1
from .benchmarks import ExperimentConfig, run_experiment
from .calibration import CalibratedModel, CalibrationMap, apply, fit_beta, fit_isotonic, fit_variance_scale, metrics
from .dataset_io import FidelityDataset, load_dataset, load_model, save_dataset, save_model
from .dgp import DeepGpStack, DgpConfig, fit_dgp
from .gp import GaussianPrediction, GpModel
from .gp import fit as fit_gp
from .problems import PROBLEMS, eval_problem, get_problem
from .stack import NonlinearStack, fit_stack

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "adapt_loop", "Ar1Chain", "fit_ar1", "ExperimentConfig", "run_experiment",
    "CalibratedModel", "CalibrationMap", "apply", "fit_beta", "fit_isotonic", "fit_variance_scale",
    "metrics", "FidelityDataset", "load_dataset", "load_model", "save_dataset", "save_model",
    "DeepGpStack", "DgpConfig", "fit_dgp", "GaussianPrediction", "GpModel", "fit_gp", "PROBLEMS",
    "eval_problem", "get_problem", "NonlinearStack", "fit_stack",
]
