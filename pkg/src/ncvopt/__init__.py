"""Smoothing parameter selection for penalized regression by neighbourhood
cross validation."""

from .families import ELF, Gamma, Gaussian, GaussianLS, Poisson, elf_family, gaussian_ls_family, loss_eval, make_family
from .fit import FittedModel, Problem, dbeta_drho, fit_inner
from .model import Design, ModelSpec, build_design
from .ncv import NcvResult, fold_step, ncv, ncv_gradient, ncv_refit, ncv_value
from .optimize import OptimizerSettings, OptimResult, minimize_nested, optimize_ncv
from .schemes import NeighbourhoodScheme, make_scheme, parse_rule
from .uq import CovarianceEstimate, covariance, pointwise_bands

__version__ = "0.1.0"
