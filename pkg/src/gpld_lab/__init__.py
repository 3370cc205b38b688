"""Gradient-penalized latent dynamics: autodiff engine, penalty estimators,
discrete MDP smoothing, a categorical-latent world model and an experiment runner."""

__version__ = "0.1.0"
