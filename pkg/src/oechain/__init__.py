"""Operator-entanglement dynamics of dephasing spin-1/2 chains.

Infinite (and finite) matrix-product-operator evolution of Lindblad
dynamics with local dephasing, built on a U(1)xU(1) block-sparse tensor
core, with symmetry-resolved operator entanglement analytics, a dense
vectorized-Liouvillian reference, and a classical exclusion-process
reference for the strong-dephasing limit.
"""

__version__ = "0.1.0"
