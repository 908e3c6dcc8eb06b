"""Fermionic matrix product states with closure-vector gauge."""

__version__ = "0.1.0"
