"""GLM ratemaking: claim frequency and severity models, diagnostics and multiplicative tariffs."""

__version__ = "0.1.0"

from .bands import RatingFactors, Scheme, load_scheme
from .design import RatingData, build_design, parse_formula
from .families import Bernoulli, Gamma, InverseGaussian, NegativeBinomial, Poisson
from .glm import FitControl, FittedModel, fit, fit_negbin, load_model, predict, save_model
from .tariff import build_tariff, quote

__all__ = [
    "Bernoulli", "FitControl", "FittedModel", "Gamma", "InverseGaussian", "NegativeBinomial", "Poisson",
    "RatingData", "RatingFactors", "Scheme", "build_design", "build_tariff", "fit", "fit_negbin",
    "load_model", "load_scheme", "parse_formula", "predict", "quote", "save_model",
]
