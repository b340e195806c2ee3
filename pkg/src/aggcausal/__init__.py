"""Causal feature selection and disaggregation regression for aggregated incidence data."""

__version__ = "0.1.0"
