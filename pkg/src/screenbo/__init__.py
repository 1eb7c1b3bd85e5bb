"""Two-test Bayesian optimization for cheap/expensive screening problems."""

__version__ = "0.1.0"
