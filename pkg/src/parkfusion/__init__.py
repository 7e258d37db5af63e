"""Parking availability forecasting with multi-source demand fusion."""

__version__ = "0.1.0"
