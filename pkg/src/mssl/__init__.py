"""Multivariate spike-and-slab lasso: joint sparse regression and precision estimation."""
from __future__ import annotations

__version__ = "0.1.0"

from .core import (DataSet, EcmState, FitOptions, InstabilityError, ModeCell, ModeGrid,
                   MsslError, PenaltyConfig, ValidationError, standardize)
from .ecm import ecm_fit
from .explorer import dcpe, default_ladders, dpe, sep_ssl_ssg, stabilization_report

__all__ = ["DataSet", "EcmState", "FitOptions", "InstabilityError", "ModeCell", "ModeGrid",
           "MsslError", "PenaltyConfig", "ValidationError", "standardize", "ecm_fit", "dcpe",
           "default_ladders", "dpe", "sep_ssl_ssg", "stabilization_report"]
