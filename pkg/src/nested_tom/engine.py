"""Exact enumeration and amortized importance-sampling inference.

Both engines run against an `EpisodeModel`, the per-episode contract each
environment implements.  A model exposes, for one recorded episode:

* per-step log likelihoods of the lower-level (modeled) agents' observed
  actions under each of their candidate goals, and
* the top-level agent's policy log likelihood at each step given its goal
  and the lower-level beliefs it would hold at that step.

Beliefs about a lower agent's goal entering step ``s`` condition on the
actions observed strictly before ``s`` (what the reasoning agent knew when
it acted); the observer-side posterior after a prefix of ``t`` steps
conditions on all ``t`` observed actions.

The amortized engine draws goal hypotheses from pluggable proposals and
corrects them with importance weights.  Hypotheses are static within one
call: a sampled particle keeps its goal across the prefix, with the
proposal density taken from the final step's proposal.  Nested beliefs are
rebuilt from the sampled atoms by the same prior-driven reweighting the
exact engine uses, so their proposal-density ratio is one.  With stratified
draws and budgets equal to the space sizes the sampler reproduces exact
enumeration identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .core import Diagnostics, effective_sample_size, make_rng
from .errors import UnsupportedLevel
from .proposals import CategoricalProposal, UniformProposal
from .spaces import HypothesisSpace, InferenceConfig, Posterior, posterior_from_log


class EpisodeModel(Protocol):
    """Per-episode inference surface provided by an environment."""

    episode_id: str
    T: int
    top_space: HypothesisSpace
    lower_spaces: tuple[HypothesisSpace, ...]
    joint_space: HypothesisSpace

    def lower_loglik(self, source: int) -> np.ndarray:
        """(T, H_source) log policy likelihood of the source's observed actions."""
        ...

    def top_loglik_sum(
        self, t: int, top_idx: int, trajs: Sequence[tuple[np.ndarray, np.ndarray]]
    ) -> float:
        """Sum over steps s < t of the top agent's action log likelihood.

        ``trajs[source] = (indices, beliefs)`` where ``beliefs[s]`` is the
        probability vector over the sampled hypothesis ``indices`` entering
        step ``s`` (rows 0..t-1 at least).
        """
        ...

    def predict_policy(
        self, t: int, top_idx: int, beliefs: Sequence[tuple[np.ndarray, np.ndarray]]
    ) -> np.ndarray:
        """Action distribution of the top agent at step ``t`` under one goal."""
        ...

    def lower_features(self, source: int, t: int) -> np.ndarray: ...

    def top_features(self, t: int) -> np.ndarray: ...


@dataclass
class EvalCounter:
    """Per-restart policy-evaluation accounting.

    One unit is one (step, hypothesis) policy-distribution evaluation a
    per-step inference restart requires.  Exact enumeration at prefix t
    charges t * (|top space| + sum of lower space sizes); the sampler
    charges its particle budgets instead.  Wall-clock caching does not
    change the count.
    """

    policy_evals: int = 0

    def charge(self, prefix_len: int, hypotheses_per_step: int) -> None:
        self.policy_evals += prefix_len * hypotheses_per_step


@dataclass(frozen=True)
class ProposalSet:
    top: CategoricalProposal
    lower: CategoricalProposal

    @staticmethod
    def uniform() -> "ProposalSet":
        return ProposalSet(UniformProposal(), UniformProposal())


@dataclass
class InferenceResult:
    joint: Posterior
    top_marginal: np.ndarray
    lower_marginals: list[np.ndarray]
    lower_sampled: list[tuple[np.ndarray, np.ndarray]]  # (indices, belief at final step)


def _log_uniform(n: int) -> np.ndarray:
    return np.full(n, -math.log(n))


def _exclusive_cumsum(rows: np.ndarray) -> np.ndarray:
    """(T, H) -> (T + 1, H); row u holds the sum over steps < u."""
    out = np.zeros((rows.shape[0] + 1, rows.shape[1]))
    np.cumsum(rows, axis=0, out=out[1:])
    return out


def exact_lower_rows(model: EpisodeModel, source: int) -> np.ndarray:
    """(T + 1, H) log cumulative likelihoods; row u conditions on steps < u."""
    size = model.lower_spaces[source].size
    return _exclusive_cumsum(model.lower_loglik(source)) + _log_uniform(size)


def _belief_rows_from_log(log_rows: np.ndarray, diagnostics: Optional[Diagnostics]) -> np.ndarray:
    """Row-wise normalized beliefs; collapsed rows fall back to uniform."""
    m = log_rows.max(axis=1, keepdims=True)
    collapsed = ~np.isfinite(m[:, 0])
    safe = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(log_rows - safe)
    w[collapsed] = 1.0
    if collapsed.any() and diagnostics is not None:
        for _ in range(int(collapsed.sum())):
            diagnostics.record_collapse()
    return w / w.sum(axis=1, keepdims=True)


def exact_posterior(
    model: EpisodeModel,
    level: int,
    t: int,
    source: int = 0,
    counter: Optional[EvalCounter] = None,
) -> Posterior:
    """Reference posterior by full enumeration after a prefix of ``t`` steps.

    Level 1 returns the posterior over the given lower source's goals.
    Level 2 returns the posterior over the joint space: the top agent's
    goal crossed with every lower source's goal, where each top hypothesis
    is scored under the exactly computed lower belief trajectory.
    ``t`` may be 0, which returns the prior.
    """
    if level not in (1, 2):
        raise UnsupportedLevel(f"level {level} not supported (only 1 and 2)")
    if not (0 <= t <= model.T):
        raise ValueError(f"prefix length {t} outside [0, {model.T}]")
    if level == 1:
        space = model.lower_spaces[source]
        rows = exact_lower_rows(model, source)
        if counter is not None:
            counter.charge(t, space.size)
        return posterior_from_log(space, rows[t])

    lower_rows = [exact_lower_rows(model, s) for s in range(len(model.lower_spaces))]
    trajs = [
        (np.arange(model.lower_spaces[s].size), _belief_rows_from_log(lower_rows[s][: t + 1], None))
        for s in range(len(model.lower_spaces))
    ]
    prior = _log_uniform(model.top_space.size)
    top_log = np.array(
        [prior[k] + model.top_loglik_sum(t, k, trajs) for k in range(model.top_space.size)]
    )
    top = posterior_from_log(model.top_space, top_log)
    lowers = [posterior_from_log(model.lower_spaces[s], lower_rows[s][t]) for s in
              range(len(model.lower_spaces))]
    if counter is not None:
        counter.charge(t, model.top_space.size + sum(sp.size for sp in model.lower_spaces))
    joint = top.probs
    for lp in lowers:
        joint = np.multiply.outer(joint, lp.probs)
    return Posterior(model.joint_space, joint.reshape(-1))


def inclusion_probabilities(probs: np.ndarray, n: int) -> np.ndarray:
    """Without-replacement inclusion probabilities for a size-n PPS design.

    Starts from n * probs and iteratively caps entries at one, spreading
    the excess over the uncapped remainder.  When n equals the number of
    atoms every inclusion probability is exactly one.
    """
    p = np.asarray(probs, dtype=float)
    if n >= p.size:
        return np.ones(p.size)
    pi = np.zeros(p.size)
    active = p > 0
    remaining = n
    while True:
        total = p[active].sum()
        if total <= 0 or remaining <= 0:
            break
        scaled = remaining * p / total
        over = active & (scaled >= 1.0)
        if not over.any():
            pi[active] = scaled[active]
            break
        pi[over] = 1.0
        remaining -= int(over.sum())
        active = active & ~over
        p = np.where(active, p, 0.0)
    return np.clip(pi, 0.0, 1.0)


def draw_hypotheses(
    probs: np.ndarray,
    n: int,
    stratified: bool,
    rng_parts: tuple,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample hypothesis indices plus their per-draw proposal densities.

    Stratified mode runs a systematic probability-proportional-to-size scan
    without replacement; the recorded density for atom i is pi_i / n so the
    mean unnormalized weight stays an unbiased evidence estimate.  The iid
    mode draws with replacement, one hashed uniform per particle.
    """
    probs = np.asarray(probs, dtype=float)
    probs = probs / probs.sum()
    if stratified:
        n = min(n, int(np.count_nonzero(probs > 0)) or 1)
        pi = inclusion_probabilities(probs, n)
        cum = np.cumsum(pi)
        cum[-1] = float(n)
        u = make_rng(*rng_parts, 0).uniform()
        points = u + np.arange(n)
        idx = np.searchsorted(cum, points, side="right")
        idx = np.minimum(idx, probs.size - 1)
        return idx, pi[idx] / n
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    us = np.array([make_rng(*rng_parts, i).uniform() for i in range(n)])
    idx = np.searchsorted(cum, us, side="right")
    idx = np.minimum(idx, probs.size - 1)
    return idx, probs[idx]


def compute_lower_weight(
    model: EpisodeModel, source: int, t: int, hyp_idx: int, proposal_density: float
) -> float:
    """Unnormalized importance weight of one lower-goal particle.

    With observed joint actions in a fully observable record the weight
    reduces to prior times the product of the modeled agent's policy
    likelihoods over the prefix, divided by the recorded proposal density.
    """
    rows = model.lower_loglik(source)[:t, hyp_idx]
    log_num = -math.log(model.lower_spaces[source].size) + float(rows.sum())
    return math.exp(log_num) / proposal_density


def compute_weight(
    model: EpisodeModel,
    t: int,
    top_idx: int,
    trajs: Sequence[tuple[np.ndarray, np.ndarray]],
    proposal_density: float,
) -> float:
    """Unnormalized importance weight of one top-level particle.

    The numerator multiplies the top agent's policy likelihood of its
    observed actions under the supplied nested belief trajectory; the
    nested-belief proposal factor is identically one because beliefs are
    rebuilt by the prior particle update.  The denominator is the recorded
    proposal density of the sampled goal.
    """
    top_log = _log_uniform(model.top_space.size)[top_idx]
    log_num = top_log + model.top_loglik_sum(t, top_idx, trajs)
    return math.exp(log_num) / proposal_density


def _lower_budget(config: InferenceConfig, source: int, size: int) -> int:
    raw = config.particles_per_level.get(1, size)
    n = raw[source] if isinstance(raw, tuple) else raw
    if config.stratified:
        n = min(n, size)
    return max(1, int(n))


def _top_budget(config: InferenceConfig, size: int) -> int:
    raw = config.particles_per_level.get(2, size)
    n = raw if not isinstance(raw, tuple) else raw[0]
    if config.stratified:
        n = min(n, size)
    return max(1, int(n))


def importance_sample(
    model: EpisodeModel,
    t: int,
    config: InferenceConfig,
    proposals: ProposalSet,
    prev_top: Optional[np.ndarray] = None,
    prev_lower: Optional[list[np.ndarray]] = None,
    diagnostics: Optional[Diagnostics] = None,
    counter: Optional[EvalCounter] = None,
) -> InferenceResult:
    """One amortized level-2 inference restart for the prefix of ``t`` steps.

    Draws goal particles for every lower source and for the top agent from
    the proposals conditioned on the full prefix, weights them with
    `compute_weight`, aggregates duplicates, and normalizes over the joint
    space; unsampled hypotheses keep probability zero.
    """
    sources = range(len(model.lower_spaces))
    trajs: list[tuple[np.ndarray, np.ndarray]] = []
    lower_marginals: list[np.ndarray] = []
    budget_total = 0
    for s in sources:
        space = model.lower_spaces[s]
        n = _lower_budget(config, s, space.size)
        budget_total += n
        feats = model.lower_features(s, t)
        prev = prev_lower[s] if prev_lower is not None else None
        probs = proposals.lower.probabilities(space.size, feats, prev)
        idx, dens = draw_hypotheses(
            probs, n, config.stratified, (config.seed, model.episode_id, 1, s, t)
        )
        rows = model.lower_loglik(s)[: max(t, 0), idx]
        # Nested belief trajectory: a prior-initialized particle update over
        # the sampled atoms (the belief proposal equals the prior, so its
        # importance ratio is one).  With exhaustive stratification this is
        # exact Bayes.
        log_b = _exclusive_cumsum(rows) + _log_uniform(space.size)[0]
        beliefs = _belief_rows_from_log(log_b, diagnostics)
        trajs.append((idx, beliefs))
        # Posterior marginal over this source's goals: the goal atoms were
        # drawn from the proposal, so here the density correction applies.
        log_m = log_b[t] - np.log(dens)
        marg = _belief_rows_from_log(log_m[None, :], diagnostics)[0]
        dense = np.zeros(space.size)
        np.add.at(dense, idx, marg)
        lower_marginals.append(dense)
        if diagnostics is not None:
            diagnostics.record_ess(model.episode_id, 1, t, effective_sample_size(marg))

    top_space = model.top_space
    n_top = _top_budget(config, top_space.size)
    budget_total += n_top
    top_probs = proposals.top.probabilities(top_space.size, model.top_features(t), prev_top)
    top_idx, top_dens = draw_hypotheses(
        top_probs, n_top, config.stratified, (config.seed, model.episode_id, 2, "top", t)
    )
    weights = np.array(
        [compute_weight(model, t, int(k), trajs, float(d)) for k, d in zip(top_idx, top_dens)]
    )
    if weights.sum() <= 0.0:
        if diagnostics is not None:
            diagnostics.record_collapse()
        weights = np.ones_like(weights)
    weights = weights / weights.sum()
    if diagnostics is not None:
        diagnostics.record_ess(model.episode_id, 2, t, effective_sample_size(weights))
    if counter is not None:
        counter.charge(max(t, 1), budget_total)

    top_marginal = np.zeros(top_space.size)
    np.add.at(top_marginal, top_idx, weights)
    joint = top_marginal
    for dense in lower_marginals:
        joint = np.multiply.outer(joint, dense)
    result = InferenceResult(
        joint=Posterior(model.joint_space, joint.reshape(-1)),
        top_marginal=top_marginal,
        lower_marginals=lower_marginals,
        lower_sampled=[(idx, beliefs[t]) for idx, beliefs in trajs],
    )
    return result


def exact_sequence(
    model: EpisodeModel, level: int, counter: Optional[EvalCounter] = None
) -> list[Posterior]:
    """Exact posterior after each prefix t = 1..T."""
    return [exact_posterior(model, level, t, counter=counter) for t in range(1, model.T + 1)]


def infer_sequence(
    model: EpisodeModel,
    level: int,
    config: InferenceConfig,
    proposals: ProposalSet,
    diagnostics: Optional[Diagnostics] = None,
    counter: Optional[EvalCounter] = None,
) -> list[Posterior]:
    """Amortized posteriors for every prefix t = 1..T.

    Each step is an independent importance-sampling restart (not sequential
    Monte Carlo): proposal quality improves with longer prefixes, so fresh
    samples at every step dominate carrying particles forward.  The
    previous step's marginals feed the proposals as recurrent context.
    Deterministic given (config.seed, episode).
    """
    if level not in (1, 2):
        raise UnsupportedLevel(f"level {level} not supported (only 1 and 2)")
    out: list[Posterior] = []
    prev_top: Optional[np.ndarray] = None
    prev_lower: Optional[list[np.ndarray]] = None
    for t in range(1, model.T + 1):
        if level == 1:
            space = model.lower_spaces[0]
            n = _lower_budget(config, 0, space.size)
            feats = model.lower_features(0, t)
            prev = prev_lower[0] if prev_lower is not None else None
            probs = proposals.lower.probabilities(space.size, feats, prev)
            idx, dens = draw_hypotheses(
                probs, n, config.stratified, (config.seed, model.episode_id, 1, 0, t)
            )
            w = np.array(
                [
                    compute_lower_weight(model, 0, t, int(h), float(d))
                    for h, d in zip(idx, dens)
                ]
            )
            if w.sum() <= 0:
                if diagnostics is not None:
                    diagnostics.record_collapse()
                w = np.ones_like(w)
            w = w / w.sum()
            if diagnostics is not None:
                diagnostics.record_ess(model.episode_id, 1, t, effective_sample_size(w))
            if counter is not None:
                counter.charge(t, n)
            dense = np.zeros(space.size)
            np.add.at(dense, idx, w)
            post = Posterior(space, dense)
            prev_lower = [dense]
            out.append(post)
        else:
            res = importance_sample(
                model, t, config, proposals, prev_top, prev_lower, diagnostics, counter
            )
            prev_top = res.top_marginal
            prev_lower = res.lower_marginals
            out.append(res.joint)
    return out


def predict_action(
    model: EpisodeModel,
    t: int,
    top_marginal: np.ndarray,
    lower_beliefs: Sequence[tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    """Expected next-action distribution of the top agent at step ``t``.

    Mixes the top agent's policy under each goal hypothesis, weighted by
    the supplied goal posterior, using the given lower-level beliefs.
    """
    marginal = np.asarray(top_marginal, dtype=float)
    probs: Optional[np.ndarray] = None
    for k, p in enumerate(marginal):
        if p <= 0 and probs is not None:
            continue
        pol = model.predict_policy(t, k, lower_beliefs)
        probs = p * pol if probs is None else probs + p * pol
    assert probs is not None
    total = probs.sum()
    if total <= 0:
        return np.full(probs.size, 1.0 / probs.size)
    return probs / total


def marginal_shapes(model: EpisodeModel) -> tuple[int, ...]:
    return (model.top_space.size, *(sp.size for sp in model.lower_spaces))


def top_marginal_of(model: EpisodeModel, joint: Posterior) -> np.ndarray:
    shaped = joint.probs.reshape(marginal_shapes(model))
    axes = tuple(range(1, shaped.ndim))
    return shaped.sum(axis=axes) if axes else shaped
