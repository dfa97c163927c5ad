"""Nested multi-agent goal and belief inference with amortized proposals."""

__version__ = "0.1.0"

from .core import (
    Episode,
    Goal,
    InteractiveState,
    ParticleBelief,
    PolicyDistribution,
    WeightedParticle,
    boltzmann_policy,
    normalize,
    particle_update,
)
from .spaces import HypothesisSpace, InferenceConfig, Posterior, kl_divergence

__all__ = [
    "Episode",
    "Goal",
    "HypothesisSpace",
    "InferenceConfig",
    "InteractiveState",
    "ParticleBelief",
    "PolicyDistribution",
    "Posterior",
    "WeightedParticle",
    "boltzmann_policy",
    "kl_divergence",
    "normalize",
    "particle_update",
]
