"""Symmetry-breaking equilibrium states of long-range Ising rings.

Exact diagonalisation in the zero-momentum, inversion-even sector, the
conserved charges C, K and Pi, generalized Gibbs ensembles built from them,
and the ramp/quench protocols used to probe them.
"""

__version__ = "0.1.0"
