"""Forecasting of irregularly observed graph time series.

Continuous-time per-node latent states with closed-form inter-observation
dynamics, GRU updates driven by graph message passing, a multi-horizon
weighted loss, baselines, a synthetic-data pipeline and a training harness.
"""

__version__ = "0.1.0"
