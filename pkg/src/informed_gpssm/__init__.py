"""Fourier-feature Gaussian process state-space models with an informed kernel
and a receding-horizon out-of-distribution monitor."""

__version__ = "0.1.0"
