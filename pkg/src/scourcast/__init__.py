"""Scour forecasting toolkit: neural forecasters trained with an auxiliary
physics loss built from calibratable hydraulic equations, plus standalone
export of the calibrated equations."""

from . import autodiff, cee, datapipe, models, physics, synth, training

__version__ = "0.1.0"

__all__ = ["autodiff", "cee", "datapipe", "models", "physics", "synth",
           "training", "__version__"]
