"""
CoulombGasLab
Numerical laboratory for two-dimensional Coulomb gases: equilibrium measures,
next-order energies, samplers, linear-statistics fluctuations and transport.
"""

__version__ = "0.1.0"
__description__ = "Numerical laboratory for two-dimensional Coulomb gases"
