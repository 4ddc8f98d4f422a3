"""Differentiable n-step Newton-Raphson power flow for joint state and parameter estimation."""

__version__ = "0.1.0"
