"""Bailout decisions on a financial contagion network as a finite-horizon MDP."""

__version__ = "0.1.0"
