"""Graph-network forecasting for hierarchically related time series."""

__version__ = "0.1.0"
