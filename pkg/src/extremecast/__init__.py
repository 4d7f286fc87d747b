"""Next-step reflectance / kNDVI forecasting on minicubes, with attribution."""

__version__ = "0.1.0"
