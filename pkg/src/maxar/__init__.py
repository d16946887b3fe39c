"""Space-time max-autoregressive Brown-Resnick fields with advection:
simulation, pairwise-likelihood fitting, forecasting and verification."""

__version__ = "0.1.0"

from .errors import DataError, MaxarError, NumericalError, ValidationError
from .grid import SpatialGrid, SpaceTimeField, build_mask, load_field, save_field
from .gev import GevParams, fit_gev, fit_marginals, standardize_field, from_frechet, to_frechet
from .brown_resnick import Semivariogram, simulate_br, conditional_sample_br
from .model import ModelParams, StPair, simulate_st, conditional_law, theoretical_crosscorr
from .inference import fit_two_step, bootstrap_ci, spatial_pl, spacetime_pl
from .forecast import ForecastRequest, forecast_point, forecast_grid
from .diagnostics import ratio_field_cdf, detect_atom, fmadogram_theta, empirical_crosscorr
from .scoring import crps, rmse_of_mean, evaluate_protocol
