"""Continuum solid-on-solid slope dynamics and its hydrodynamic limit."""
__version__ = "0.1.0"
