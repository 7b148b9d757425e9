"""Desk-scale laboratory for on- and off-manifold adversarial robustness."""

__version__ = "0.1.0"
