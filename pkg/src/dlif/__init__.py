"""Liveness/identity disentanglement toolkit on synthetic factorized faces."""

__version__ = "0.1.0"
