"""Regularized diffusion posterior sampling for electrical impedance tomography on meshes."""

__version__ = "0.1.0"
