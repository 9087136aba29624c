"""Multi-level quantile simulation optimisation.

Modules
-------
sim_core      test problems, seeded simulators and closed-form quantiles
quantile_est  order-statistic quantiles and sectioning covariances
cokrige       multi-level stochastic co-kriging with non-crossing fitting
optimizer     the sequential search/allocation loop and its single-level baseline
bench         macro-replications, run metrics and result files
cli           the ``qmlopt`` command
"""
from .cokrige import FitOptions, FittingError, Hyperparams, ModelInputs, assemble, fit, predict
from .optimizer import OptimizerConfig, run
from .quantile_est import QuantilePanel, empirical_quantile, sectioning_panel
from .sim_core import LossProblem, RngStream, get_problem, simulate, true_argmin, true_quantile

__version__ = "0.1.0"
