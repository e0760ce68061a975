"""Privacy–utility trade-off laboratory for federated learning.

Exact Bayesian leakage over finite candidate universes, four protection
mechanisms, inference attacks, and numerical checks of the trade-off bounds.
"""

__version__ = "0.1.0"
