"""Hypothesis spaces, categorical posteriors, and inference configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .core import DEFAULT_FLOOR, NORMALIZATION_TOL
from .errors import SpaceMismatch


@dataclass(frozen=True)
class HypothesisSpace:
    """Ordered, immutable list of hypotheses for one reasoning level.

    The index of an entry is its hypothesis id and stays stable across a
    run.  Level-1 entries are goal ids of the modeled agent; level-2
    entries are tuples pairing the modeled agent's goal with the goal seeds
    of that agent's own lower-level belief.
    """

    level: int
    entries: tuple[Any, ...]
    label: str = ""

    def __post_init__(self) -> None:
        if len(self.entries) == 0:
            raise ValueError("hypothesis space must be nonempty")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("hypothesis entries must be unique")

    @property
    def size(self) -> int:
        return len(self.entries)

    def index(self, entry: Any) -> int:
        return self.entries.index(entry)


@dataclass(frozen=True)
class Posterior:
    """Categorical distribution aligned to an explicit hypothesis space."""

    space: HypothesisSpace
    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", arr)
        if arr.shape != (self.space.size,):
            raise ValueError(
                f"posterior has {arr.shape} probabilities for {self.space.size} hypotheses"
            )
        if np.any(arr < 0) or not np.isfinite(arr).all():
            raise ValueError("posterior entries must be finite and >= 0")
        if abs(float(arr.sum()) - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"posterior sums to {arr.sum()}, expected 1")

    def argmax_id(self) -> int:
        # ties break toward the lower hypothesis id (np.argmax is first-max)
        return int(np.argmax(self.probs))

    def prob_of(self, entry: Any) -> float:
        return float(self.probs[self.space.index(entry)])


def uniform_posterior(space: HypothesisSpace) -> Posterior:
    return Posterior(space, np.full(space.size, 1.0 / space.size))


def posterior_from_log(space: HypothesisSpace, log_weights: np.ndarray) -> Posterior:
    """Normalized posterior from unnormalized log weights (stabilized)."""
    lw = np.asarray(log_weights, dtype=float)
    m = lw.max()
    if not np.isfinite(m):
        raise ValueError("all log weights are -inf")
    w = np.exp(lw - m)
    return Posterior(space, w / w.sum())


def floor_smooth(posterior: Posterior, floor: float = DEFAULT_FLOOR) -> Posterior:
    """Floor every probability at `floor` and renormalize.

    Applied to amortized posteriors before KL evaluation so hypotheses the
    sampler never visited do not produce an infinite divergence.  Raw
    posteriors keep their exact zeros.
    """
    probs = np.maximum(posterior.probs, floor)
    return Posterior(posterior.space, probs / probs.sum())


def kl_divergence(p: Posterior, q: Posterior) -> float:
    """KL(p || q) in nats with the convention 0 * log(0 / q) = 0.

    Raises SpaceMismatch when the two posteriors are aligned to different
    hypothesis spaces.  Returns +inf when p puts mass where q has none;
    callers evaluating sampled posteriors floor q first via `floor_smooth`.
    """
    if p.space.level != q.space.level or p.space.entries != q.space.entries:
        raise SpaceMismatch(
            f"cannot compare posteriors over {p.space.label or p.space.level} "
            f"and {q.space.label or q.space.level}"
        )
    mask = p.probs > 0
    if np.any(q.probs[mask] <= 0):
        return float("inf")
    pm = p.probs[mask]
    return float(np.sum(pm * (np.log(pm) - np.log(q.probs[mask]))))


@dataclass(frozen=True)
class ProposalChoice:
    """Which proposal family the sampler draws from."""

    kind: str  # "learned" or "uniform"
    model_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("learned", "uniform"):
            raise ValueError(f"unknown proposal kind {self.kind!r}")


@dataclass(frozen=True)
class InferenceConfig:
    """Particle budgets and sampling behavior for amortized inference.

    particles_per_level maps a reasoning level to the number of particles
    allocated to each categorical sampled at that level.  When `stratified`
    is set, draws are without replacement with inclusion-probability
    corrected weights, so a budget equal to the space size recovers exact
    enumeration; budgets are then capped by the space size.
    """

    particles_per_level: dict[int, int] = field(default_factory=dict)
    proposal: ProposalChoice = ProposalChoice("uniform")
    stratified: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        for level, n in self.particles_per_level.items():
            if n < 1:
                raise ValueError(f"particle count for level {level} must be >= 1")

    def particles_at(self, level: int, space_size: int) -> int:
        n = self.particles_per_level.get(level, space_size)
        if self.stratified:
            n = min(n, space_size)
        return max(1, n)
