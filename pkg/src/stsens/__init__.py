"""Spatio-temporal forecasting with a small Temporal Fusion Transformer and
Morris-style feature sensitivity."""

__version__ = "0.1.0"
