"""Restless bandits as budgeted thresholding bandits: learners, baselines and exact checks."""

__version__ = "0.1.0"
