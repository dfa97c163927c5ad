"""Core value types and belief operations for nested multi-agent reasoning.

The data model is a level-indexed interactive state: a level-0 state is just
a world state, and a level-l state (l >= 1) pairs a world state with the
modeled agent's goal and the modeled agent's level-(l-1) belief.  Beliefs at
every level are weighted particle sets over interactive states; an exact
posterior is simply a particle belief with one particle per hypothesis.

All operations are pure.  Randomness enters only through explicitly passed
`numpy.random.Generator` instances; callers derive independent generators
with `stable_seed` and never share one across parallel workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol, Sequence

import numpy as np

from .errors import AllWeightsZero

NORMALIZATION_TOL = 1e-9
DEFAULT_BETA = 3.0
DEFAULT_FLOOR = 1e-4


def stable_seed(*parts: Any) -> int:
    """Derive a reproducible 63-bit seed from arbitrary hashable parts.

    Uses SHA-256 over the repr of the parts so the result is identical
    across processes and platforms (unlike Python's salted `hash`).
    """
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def make_rng(*parts: Any) -> np.random.Generator:
    """Seeded generator keyed by the given parts."""
    return np.random.default_rng(stable_seed(*parts))


@dataclass(frozen=True)
class Goal:
    """Index into an environment-declared finite ordered goal space."""

    id: int
    space_size: int

    def __post_init__(self) -> None:
        if not (0 <= self.id < self.space_size):
            raise ValueError(f"goal id {self.id} outside space of size {self.space_size}")


@dataclass(frozen=True)
class InteractiveState:
    """Level-indexed hypothesis about the world and the other agent's mind.

    level 0 carries only a world state.  level l >= 1 additionally carries
    the modeled agent's goal and that agent's level-(l-1) particle belief.
    The nesting depth is checked structurally at construction time.
    """

    level: int
    world: Any
    lower_belief: Optional["ParticleBelief"] = None
    other_goal: Optional[Goal] = None

    def __post_init__(self) -> None:
        if self.level < 0:
            raise ValueError("level must be non-negative")
        if self.level == 0:
            if self.lower_belief is not None or self.other_goal is not None:
                raise ValueError("level-0 states carry no lower belief or goal")
        else:
            if self.lower_belief is None or self.other_goal is None:
                raise ValueError(f"level-{self.level} state requires lower belief and goal")
            for p in self.lower_belief.particles:
                if p.state.level != self.level - 1:
                    raise ValueError(
                        f"lower belief particle has level {p.state.level}, "
                        f"expected {self.level - 1}"
                    )

    def depth(self) -> int:
        """Number of nested belief layers below this state."""
        if self.level == 0:
            return 0
        inner = max(p.state.depth() for p in self.lower_belief.particles)
        return 1 + inner


@dataclass(frozen=True)
class WeightedParticle:
    state: InteractiveState
    weight: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ValueError(f"particle weight must be finite and >= 0, got {self.weight}")


@dataclass(frozen=True)
class ParticleBelief:
    """Ordered set of weighted interactive-state particles sharing one level."""

    particles: tuple[WeightedParticle, ...]

    def __post_init__(self) -> None:
        if len(self.particles) == 0:
            raise ValueError("a belief needs at least one particle")
        levels = {p.state.level for p in self.particles}
        if len(levels) != 1:
            raise ValueError(f"particles must share one level, got {sorted(levels)}")

    @property
    def level(self) -> int:
        return self.particles[0].state.level

    @property
    def size(self) -> int:
        return len(self.particles)

    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.particles], dtype=float)

    def is_normalized(self, tol: float = NORMALIZATION_TOL) -> bool:
        return abs(float(self.weights().sum()) - 1.0) <= tol


def normalize(particles: Sequence[WeightedParticle]) -> ParticleBelief:
    """Rescale weights to sum to one, preserving order.

    Raises
    ------
    AllWeightsZero
        If the total weight is not positive.  Callers treat this as an
        impossible-evidence signal and typically fall back to a uniform
        re-initialization while recording a diagnostic.
    """
    if len(particles) == 0:
        raise ValueError("cannot normalize an empty particle list")
    total = float(sum(p.weight for p in particles))
    if total <= 0.0:
        raise AllWeightsZero(f"total particle weight is {total}")
    if abs(total - 1.0) < 1e-12:
        # already normalized to machine precision; keep bits unchanged so
        # normalization is exactly idempotent
        return ParticleBelief(tuple(particles))
    return ParticleBelief(tuple(WeightedParticle(p.state, p.weight / total) for p in particles))


@dataclass(frozen=True)
class PolicyDistribution:
    """Probabilities aligned to an environment's ordered action list."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", arr)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("policy must be a non-empty vector")
        if np.any(arr < 0) or not np.isfinite(arr).all():
            raise ValueError("policy entries must be finite and >= 0")
        if abs(float(arr.sum()) - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"policy sums to {arr.sum()}, expected 1")

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def log(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)


def boltzmann_policy(
    action_values: np.ndarray,
    beta: float = DEFAULT_BETA,
    floor: float = DEFAULT_FLOOR,
) -> PolicyDistribution:
    """Softmax over action values mixed with a uniform floor.

    Values are clamped to a finite range and the softmax is computed with
    log-sum-exp stabilization.  The floor mixes `floor` probability mass
    into every action so observed actions never have zero likelihood; the
    argmax is preserved whenever the maximum value is unique.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    values = np.asarray(action_values, dtype=float)
    n = values.size
    if floor < 0 or floor * n > 1.0 + 1e-12:
        raise ValueError(f"floor {floor} too large for {n} actions")
    values = np.clip(values, -1e12, 1e12)
    scaled = beta * values
    scaled -= scaled.max()
    expv = np.exp(scaled)
    soft = expv / expv.sum()
    probs = (1.0 - floor * n) * soft + floor
    return PolicyDistribution(probs / probs.sum())


class EnvContract(Protocol):
    """Minimal environment surface `particle_update` requires.

    `transition` advances one particle's interactive state given the
    believing agent's own action, sampling the modeled agent's action from
    its policy at the particle's level.  `observation_likelihood` scores an
    observation against the advanced particle.  Environments whose
    observations identify the modeled agent's action may implement
    `exact_action_likelihood` to replace the sampling step with the exact
    policy probability (a Rao-Blackwellized update); `particle_update`
    prefers it when it returns a value.
    """

    def transition(
        self, state: InteractiveState, own_action: Any, rng: np.random.Generator
    ) -> InteractiveState: ...

    def observation_likelihood(self, observation: Any, state: InteractiveState) -> float: ...

    def exact_action_likelihood(
        self, state: InteractiveState, own_action: Any, observation: Any
    ) -> Optional[tuple[InteractiveState, float]]: ...


def particle_update(
    belief: ParticleBelief,
    observation: Any,
    own_action: Any,
    env: EnvContract,
    rng: np.random.Generator,
) -> ParticleBelief:
    """One prior-driven belief transition.

    Each particle's world is advanced through the environment dynamics
    (marginalizing the modeled agent's action by sampling from its policy,
    unless the environment provides the exact action likelihood), then
    reweighted by the observation likelihood and normalized.  The particle
    count is unchanged.  Raises AllWeightsZero when no particle survives.
    """
    updated: list[WeightedParticle] = []
    for particle in belief.particles:
        exact = env.exact_action_likelihood(particle.state, own_action, observation)
        if exact is not None:
            new_state, action_lik = exact
            lik = action_lik * env.observation_likelihood(observation, new_state)
        else:
            new_state = env.transition(particle.state, own_action, rng)
            lik = env.observation_likelihood(observation, new_state)
        updated.append(WeightedParticle(new_state, particle.weight * lik))
    return normalize(updated)


@dataclass(frozen=True)
class AgentRole:
    id: str
    level: int
    goal: int
    attentive: bool = True


@dataclass(frozen=True)
class EpisodeStep:
    state: Any
    actions: dict[str, Any]
    obs: dict[str, Any]


@dataclass(frozen=True)
class Episode:
    """Synthesized trajectory: per-step world state, joint actions, observations."""

    env: str
    seed: int
    kind: str
    agents: tuple[AgentRole, ...]
    steps: tuple[EpisodeStep, ...]

    def __post_init__(self) -> None:
        if len(self.steps) < 1:
            raise ValueError("an episode needs at least one step")
        ids = {a.id for a in self.agents}
        for step in self.steps:
            extra = set(step.actions) - ids
            if extra:
                raise ValueError(f"step actions reference unknown agents {sorted(extra)}")

    @property
    def length(self) -> int:
        return len(self.steps)

    def agent(self, agent_id: str) -> AgentRole:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)


@dataclass
class Diagnostics:
    """Counters shared across inference calls within one run."""

    all_weights_zero: int = 0
    ess_log: list[dict[str, float]] = field(default_factory=list)

    def record_ess(self, episode: str, level: int, t: int, ess: float) -> None:
        self.ess_log.append(
            {"episode": episode, "level": level, "t": t, "ess": float(ess)}
        )

    def record_collapse(self) -> None:
        self.all_weights_zero += 1


def effective_sample_size(normalized_weights: np.ndarray) -> float:
    w = np.asarray(normalized_weights, dtype=float)
    return float(1.0 / np.sum(w * w))
