"""Two-stage Bayesian novelty detection with variational inference."""

__version__ = "0.1.0"
