"""Numerics for nonlocal minimal surfaces.

Kernels, singular integrals, graph identities, Holder norms and a Dirichlet solver.
"""
