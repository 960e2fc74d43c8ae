"""Trajectory simulation and extremal-path analysis for a homodyne-monitored driven qubit.

Subpackages cover the full pipeline: stochastic trajectory generation
(`sde_sim`), path-probability and post-selection analysis (`pathprob`),
the variational extremal-path solver (`mlp`), momentum-manifold sweeps and
fold detection (`manifold`), ensemble bipartition and relative-probability
fits (`cluster`), and the pure-state polar reduction with its fixed-point
and winding analysis (`purestate`).
"""

__version__ = "0.1.0"

from .core import BlochState, PhysParams, TimeGrid, bloch_norm, convert_config

__all__ = [
    "BlochState",
    "PhysParams",
    "TimeGrid",
    "bloch_norm",
    "convert_config",
    "__version__",
]
