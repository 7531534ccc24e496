"""Learned nonlinear nudging for data assimilation on periodic chaotic systems."""

from . import autodiff, assimilation, dynamics, evaluation, fileformats, networks, observation, training

__version__ = "0.1.0"

__all__ = ["autodiff", "assimilation", "dynamics", "evaluation", "fileformats", "networks",
           "observation", "training", "__version__"]
