"""Budgeted sequential feature acquisition with Bernoulli policies."""

__version__ = "0.1.0"
