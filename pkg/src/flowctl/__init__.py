"""Flow-matching generation with stochastic optimal control on toy problems."""

__version__ = "0.1.0"
