"""Numerical core: weight geometry, population gradients, critical points, flows and experiment runners."""
