"""Quantile-particle simulation of a Fourier-kernel diffusion on the Wasserstein space."""

__version__ = "0.1.0"
