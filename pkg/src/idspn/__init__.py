"""Multiset-equivariant set prediction by inner optimization (DSPN/iDSPN)."""

__version__ = "0.1.0"
