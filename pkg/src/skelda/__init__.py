"""Twin-experiment toolkit for physically constrained ensemble data assimilation
on the stochastic skeleton model of tropical intraseasonal dynamics.

Subpackages cover the forward model, synthetic observations, unconstrained and
constrained ensemble filters, a small policy-network stack, the ensemble-of-agents
emulator with primal-dual constraint enforcement, skill scores, and the experiment
pipeline CLI.
"""

__version__ = "0.1.0"
