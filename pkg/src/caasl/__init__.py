"""Amortized active intervention design for causal structure learning.

Simulators (linear SCMs and a single-cell gene-expression model), a
hidden-parameter design environment with a graph-accuracy reward, alternating
attention transformer networks, an amortized edge posterior trained in-repo,
soft actor-critic training with a critic ensemble, and an evaluation harness.
"""

__version__ = "0.1.0"
