"""Flow-based stochastic policies as sequential models, trained with off-policy actor-critic."""

__version__ = "0.1.0"
