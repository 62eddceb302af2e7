"""Module-wise adversarial noise attacks on a staged driving stack."""

__version__ = "0.1.0"
