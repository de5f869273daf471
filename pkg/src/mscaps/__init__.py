"""Multiscale capsule network for bitemporal SAR change detection, on a NumPy autodiff core."""

__version__ = "0.1.0"
