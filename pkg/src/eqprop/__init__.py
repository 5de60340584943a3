"""Equilibrium Propagation for convergent RNNs."""
