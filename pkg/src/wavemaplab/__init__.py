"""Numerical laboratory for the two-bubble construction of 2-co-rotational
wave maps: profiles, modulation laws, inner and outer corrections, radial
wave solvers and spectral checks.
"""

__version__ = "0.1.0"
