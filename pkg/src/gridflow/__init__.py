"""AC power-flow solving, scenario generation and a learned iterative estimator."""

__version__ = "0.1.0"
