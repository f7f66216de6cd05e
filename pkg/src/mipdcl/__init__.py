"""Neutrophil-guided paclitaxel precision dosing with continued hierarchical Bayesian learning."""

__version__ = "0.1.0"
