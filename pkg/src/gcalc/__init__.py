"""Numerical toolkit for G-expectations, G-SDE scenario ensembles and
path-independence checks of additive functionals."""

from gcalc.gcore import (
    BandError,
    GEvaluation,
    VolatilityBand,
    eval_g_1d,
    eval_g_inverse_1d,
    eval_g_matrix,
    nondegeneracy_delta,
    project_to_band,
)

__all__ = [
    "BandError",
    "GEvaluation",
    "VolatilityBand",
    "eval_g_1d",
    "eval_g_inverse_1d",
    "eval_g_matrix",
    "nondegeneracy_delta",
    "project_to_band",
]

__version__ = "0.1.0"
