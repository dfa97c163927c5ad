"""Proposal distributions feeding the importance sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .core import DEFAULT_FLOOR
from .errors import DimMismatch
from .mlp import MlpParams, forward, softmax
from .spaces import HypothesisSpace, Posterior


class CategoricalProposal(Protocol):
    """Produces a categorical proposal over a finite hypothesis space."""

    def probabilities(
        self, space_size: int, features: Optional[np.ndarray], prev: Optional[np.ndarray]
    ) -> np.ndarray: ...


@dataclass(frozen=True)
class UniformProposal:
    def probabilities(
        self, space_size: int, features: Optional[np.ndarray], prev: Optional[np.ndarray]
    ) -> np.ndarray:
        return np.full(space_size, 1.0 / space_size)


@dataclass(frozen=True)
class LearnedProposal:
    """Recognition-network proposal with a uniform coverage floor.

    The network consumes the observation-history features concatenated
    with the previous-step posterior, which acts as the recurrent context.
    Every hypothesis keeps at least `floor / space_size`-scale mass so the
    sampler's weights stay well defined.
    """

    params: MlpParams
    floor: float = DEFAULT_FLOOR

    def probabilities(
        self, space_size: int, features: Optional[np.ndarray], prev: Optional[np.ndarray]
    ) -> np.ndarray:
        if features is None:
            raise ValueError("learned proposal requires history features")
        if prev is None:
            prev = np.full(space_size, 1.0 / space_size)
        return propose(self.params, features, prev, floor=self.floor)

    def output_dim(self) -> int:
        return self.params.output_dim


def propose(
    params: MlpParams,
    history: np.ndarray,
    prev_posterior: np.ndarray | Posterior,
    floor: float = DEFAULT_FLOOR,
    space: Optional[HypothesisSpace] = None,
) -> Posterior | np.ndarray:
    """Softmax network output over hypotheses, floor-mixed with uniform.

    `prev_posterior` must be aligned to the network's output space (use a
    uniform vector at the first step).  Returns a Posterior when a space
    is given, otherwise the raw probability vector.
    """
    prev = prev_posterior.probs if isinstance(prev_posterior, Posterior) else prev_posterior
    prev = np.asarray(prev, dtype=float)
    if prev.shape != (params.output_dim,):
        raise DimMismatch(
            f"previous posterior has shape {prev.shape}, network outputs {params.output_dim}"
        )
    x = np.concatenate([np.asarray(history, dtype=float), prev])
    if x.shape[0] != params.input_dim:
        raise DimMismatch(f"got {x.shape[0]} inputs, network expects {params.input_dim}")
    probs = softmax(forward(params, x))
    n = probs.size
    probs = (1.0 - floor * n) * probs + floor
    probs = probs / probs.sum()
    if space is not None:
        return Posterior(space, probs)
    return probs
