"""Evaluation protocols: accuracy vs. particles, KL vs. exact, progress curves.

Accuracy is top-1 posterior-argmax match, ties broken toward the lower
hypothesis id and counted as correct only on exact match; steps are pooled
across episodes.  Each method's policy-evaluation count uses the
per-restart convention: a restart over a t-step prefix charges t times the
number of goal hypotheses the method evaluates per step (full spaces for
exact enumeration, particle budgets for the sampler).
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import construction as con
from . import driving as drv
from .core import DEFAULT_FLOOR, Diagnostics, Episode
from .engine import (
    EvalCounter,
    ProposalSet,
    exact_lower_rows,
    exact_posterior,
    importance_sample,
    infer_sequence,
    predict_action,
    top_marginal_of,
)
from .errors import MissingModel
from .pipeline import ModelBundle
from .proposals import LearnedProposal, UniformProposal, propose
from .spaces import InferenceConfig, Posterior, floor_smooth, kl_divergence

METHODS = ("exact", "ours", "ours_no_nn", "tomnet")
N_PROGRESS_BUCKETS = 10


def max_workers(requested: Optional[int] = None) -> int:
    cap = os.environ.get("NESTED_TOM_THREADS")
    cap = int(cap) if cap else (requested or 1)
    return max(1, min(cap, requested or cap))


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Order-preserving map; results are identical for any worker count."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class EvalRow:
    method: str
    particle_fraction: float
    metric: str  # accuracy | kl | accuracy_over_progress
    value: float
    stderr: float
    n_episodes: int
    policy_evals: int = 0
    bucket: int = -1  # progress bucket for accuracy_over_progress rows

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.stderr < 0:
            raise ValueError("stderr must be >= 0")


def write_eval_rows(rows: Sequence[EvalRow], path: str | Path, config_hash: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "particle_fraction", "metric", "value", "stderr",
             "n_episodes", "policy_evals", "bucket", "config_hash"]
        )
        for r in rows:
            writer.writerow(
                [r.method, f"{r.particle_fraction:.6g}", r.metric, f"{r.value:.10g}",
                 f"{r.stderr:.10g}", r.n_episodes, r.policy_evals, r.bucket, config_hash]
            )


def _mean_sem(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n == 0:
        return float("nan"), 0.0
    mean = float(values.mean())
    sem = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, sem


def _bucket(t: int, T: int) -> int:
    return min(N_PROGRESS_BUCKETS - 1, int(t * N_PROGRESS_BUCKETS / max(1, T)))


@dataclass
class StepRecord:
    correct: bool
    kl: Optional[float]
    bucket: int


@dataclass
class MethodStats:
    steps: list[StepRecord] = field(default_factory=list)
    policy_evals: int = 0

    def accuracy_rows(self, method: str, fraction: float, n_episodes: int) -> list[EvalRow]:
        acc = np.array([s.correct for s in self.steps], dtype=float)
        mean, sem = _mean_sem(acc)
        rows = [
            EvalRow(method, fraction, "accuracy", mean, sem, n_episodes, self.policy_evals)
        ]
        kls = np.array([s.kl for s in self.steps if s.kl is not None], dtype=float)
        if len(kls):
            kmean, ksem = _mean_sem(kls)
            rows.append(
                EvalRow(method, fraction, "kl", kmean, ksem, n_episodes, self.policy_evals)
            )
        return rows

    def progress_rows(self, method: str, fraction: float, n_episodes: int) -> list[EvalRow]:
        rows = []
        for b in range(N_PROGRESS_BUCKETS):
            acc = np.array([s.correct for s in self.steps if s.bucket == b], dtype=float)
            if len(acc) == 0:
                continue
            mean, sem = _mean_sem(acc)
            rows.append(
                EvalRow(method, fraction, "accuracy_over_progress", mean, sem,
                        n_episodes, self.policy_evals, bucket=b)
            )
        return rows


# --------------------------------------------------------------------------
# Construction evaluation
# --------------------------------------------------------------------------


def construction_fraction_to_budget(fraction: float, cfg: con.ConstructionConfig) -> int:
    """Lower-level particle count whose joint coverage best matches the
    requested fraction of the full (top x lower) hypothesis space."""
    joint = 2 * cfg.n_goals
    n1 = int(round(fraction * joint / 2))
    return max(1, min(cfg.n_goals, n1))


def construction_coverage(n1: int, cfg: con.ConstructionConfig) -> float:
    return 2 * n1 / (2 * cfg.n_goals)


def _construction_proposals(models: ModelBundle, learned: bool) -> ProposalSet:
    if not learned:
        return ProposalSet.uniform()
    models.require("construction_l1", "construction_l2")
    return ProposalSet(
        top=LearnedProposal(models.construction_l2),
        lower=LearnedProposal(models.construction_l1),
    )


def eval_construction(
    episodes: Sequence[Episode],
    models: ModelBundle,
    fractions: Sequence[float],
    methods: Sequence[str] = METHODS,
    cfg: Optional[con.ConstructionConfig] = None,
    seed: int = 0,
    workers: int = 1,
    diagnostics: Optional[Diagnostics] = None,
) -> list[EvalRow]:
    """Level-2 goal-inference evaluation on recorded episodes.

    Accuracy scores the inferred top goal (help or hinder) after every
    prefix; KL compares the joint posterior against exact enumeration
    with floor smoothing on the sampled side.  The exact method is
    evaluated once at fraction 1.0; the end-to-end baseline repeats its
    fraction-independent numbers at every requested fraction.
    """
    cfg = cfg or con.ConstructionConfig()
    stats: dict[tuple[str, float], MethodStats] = {}

    def key(method: str, fraction: float) -> MethodStats:
        return stats.setdefault((method, fraction), MethodStats())

    def run_episode(episode: Episode) -> dict:
        out: dict[tuple[str, float], tuple[list[StepRecord], int]] = {}
        model = con.ConstructionModel(episode, cfg)
        true_top = model.true_top_idx()
        T = model.T
        counter = EvalCounter()
        exact_seq = [exact_posterior(model, 2, t, counter=counter) for t in range(1, T + 1)]
        exact_tops = [top_marginal_of(model, p) for p in exact_seq]
        records = [
            StepRecord(int(np.argmax(m)) == true_top, None, _bucket(t, T))
            for t, m in enumerate(exact_tops)
        ]
        out[("exact", 1.0)] = (records, counter.policy_evals)

        for method in methods:
            if method == "exact":
                continue
            if method == "tomnet":
                models.require("construction_l2", "construction_l1")
                records = []
                prev2 = np.full(2, 0.5)
                prev1 = np.full(cfg.n_goals, 1.0 / cfg.n_goals)
                for t in range(1, T + 1):
                    p2 = propose(models.construction_l2, model.top_features(t), prev2)
                    p1 = propose(models.construction_l1, model.lower_features(0, t), prev1)
                    prev2, prev1 = p2, p1
                    joint = Posterior(
                        model.joint_space, np.multiply.outer(p2, p1).reshape(-1)
                    )
                    kl = kl_divergence(exact_seq[t - 1], floor_smooth(joint))
                    records.append(
                        StepRecord(int(np.argmax(p2)) == true_top, kl, _bucket(t - 1, T))
                    )
                for fraction in fractions:
                    out[("tomnet", fraction)] = (records, 0)
                continue
            proposals = _construction_proposals(models, learned=method == "ours")
            for fraction in fractions:
                n1 = construction_fraction_to_budget(fraction, cfg)
                config = InferenceConfig(
                    particles_per_level={1: n1, 2: 2},
                    stratified=True,
                    seed=seed,
                )
                counter = EvalCounter()
                seq = infer_sequence(model, 2, config, proposals,
                                     diagnostics=diagnostics, counter=counter)
                records = []
                for t, post in enumerate(seq, start=1):
                    top = top_marginal_of(model, post)
                    kl = kl_divergence(exact_seq[t - 1], floor_smooth(post))
                    records.append(
                        StepRecord(int(np.argmax(top)) == true_top, kl, _bucket(t - 1, T))
                    )
                out[(method, fraction)] = (records, counter.policy_evals)
        return out

    results = parallel_map(run_episode, list(episodes), workers)
    for per_episode in results:
        for k, (records, evals) in per_episode.items():
            key(*k).steps.extend(records)
            key(*k).policy_evals += evals

    rows: list[EvalRow] = []
    n_eps = len(episodes)
    for (method, fraction), st in sorted(stats.items()):
        rows.extend(st.accuracy_rows(method, fraction, n_eps))
        rows.extend(st.progress_rows(method, fraction, n_eps))
    return rows


# --------------------------------------------------------------------------
# Driving evaluation
# --------------------------------------------------------------------------


def driving_budget_allocation(
    fraction: float, n_others: int, n_goals: int = 3
) -> tuple[int, tuple[int, ...]]:
    """(top budget, per-source budgets) covering at most the requested
    fraction of the declared exact space (n_goals ** (1 + n_others))."""
    total = n_goals ** (1 + n_others)
    target = max(n_goals, int(round(fraction * total)))
    alloc = [1] * n_others
    while True:
        improved = False
        for k in sorted(range(n_others), key=lambda i: alloc[i]):
            if alloc[k] >= n_goals:
                continue
            trial = alloc.copy()
            trial[k] += 1
            cover = n_goals * int(np.prod(trial))
            if cover <= target:
                alloc = trial
                improved = True
                break
        if not improved:
            break
    return n_goals, tuple(alloc)


def driving_coverage(alloc: tuple[int, ...], n_others: int, n_goals: int = 3) -> float:
    return n_goals * float(np.prod(alloc)) / (n_goals ** (1 + n_others))


def eval_driving(
    episodes: Sequence[Episode],
    models: ModelBundle,
    fractions: Sequence[float],
    methods: Sequence[str] = METHODS,
    cfg: Optional[drv.DrivingConfig] = None,
    seed: int = 0,
    workers: int = 1,
    diagnostics: Optional[Diagnostics] = None,
) -> list[EvalRow]:
    """Next-action prediction for every car of every episode.

    At each step the target's action is predicted from the level-2
    posterior over its goal and the nested goal beliefs about the other
    cars, through the target's level-1 planner.  KL rows compare joint
    goal posteriors against exact enumeration (not defined for the
    end-to-end action baseline).
    """
    cfg = cfg or drv.DrivingConfig()
    stats: dict[tuple[str, float], MethodStats] = {}

    def key(method: str, fraction: float) -> MethodStats:
        return stats.setdefault((method, fraction), MethodStats())

    def run_episode(episode: Episode) -> dict:
        out: dict[tuple[str, float], tuple[list[StepRecord], int]] = {}
        data = drv.DrivingEpisodeData(episode, cfg)
        data.build()
        T = data.T
        for target_pos, agent in enumerate(episode.agents):
            model = drv.DrivingModel(data, agent.id)
            n_others = len(model.other_idx)
            exact_joints: list[Posterior] = []
            counter = EvalCounter()
            lower_rows = [exact_lower_rows(model, s) for s in range(n_others)]
            lower_beliefs_rows = []
            for rows in lower_rows:
                m = rows.max(axis=1, keepdims=True)
                w = np.exp(rows - m)
                lower_beliefs_rows.append(w / w.sum(axis=1, keepdims=True))
            records = []
            for t in range(T):
                post = exact_posterior(model, 2, t, counter=counter)
                if t > 0:
                    exact_joints.append(post)
                top = top_marginal_of(model, post)
                beliefs = [
                    (np.arange(3), lower_beliefs_rows[s][t]) for s in range(n_others)
                ]
                pred = predict_action(model, t, top, beliefs)
                records.append(
                    StepRecord(int(np.argmax(pred)) == model.observed_action_idx(t),
                               None, _bucket(t, T))
                )
            if ("exact", 1.0) not in out:
                out[("exact", 1.0)] = ([], 0)
            out[("exact", 1.0)] = (
                out[("exact", 1.0)][0] + records,
                out[("exact", 1.0)][1] + counter.policy_evals,
            )

            for method in methods:
                if method == "exact":
                    continue
                if method == "tomnet":
                    models.require("driving_tomnet")
                    recs = []
                    states = [data.cars[s][data.ids.index(agent.id)] for s in range(T)]
                    acts = [data.actions[s].get(agent.id) for s in range(T)]
                    for t in range(T):
                        feats = drv.featurize_driving(states, acts, data.honk_flags, t, cfg)
                        prev = np.full(5, 0.2)
                        if t > 0 and acts[t - 1] is not None:
                            prev = np.zeros(5)
                            prev[drv.ACTIONS.index(acts[t - 1])] = 1.0
                        p = propose(models.driving_tomnet, feats, prev)
                        recs.append(
                            StepRecord(int(np.argmax(p)) == model.observed_action_idx(t),
                                       None, _bucket(t, T))
                        )
                    for fraction in fractions:
                        prev_rec, prev_ev = out.get(("tomnet", fraction), ([], 0))
                        out[("tomnet", fraction)] = (prev_rec + recs, prev_ev)
                    continue
                if method == "ours":
                    models.require("driving_q1", "driving_q2")
                    proposals = ProposalSet(
                        top=LearnedProposal(models.driving_q2),
                        lower=LearnedProposal(models.driving_q1),
                    )
                else:
                    proposals = ProposalSet.uniform()
                for fraction in fractions:
                    n_top, alloc = driving_budget_allocation(fraction, n_others)
                    config = InferenceConfig(
                        particles_per_level={1: alloc, 2: n_top},
                        stratified=True,
                        seed=seed,
                    )
                    counter = EvalCounter()
                    recs = []
                    prev_top: Optional[np.ndarray] = None
                    prev_lower: Optional[list[np.ndarray]] = None
                    for t in range(T):
                        res = importance_sample(
                            model, t, config, proposals, prev_top, prev_lower,
                            diagnostics, counter,
                        )
                        prev_top = res.top_marginal
                        prev_lower = res.lower_marginals
                        pred = predict_action(model, t, res.top_marginal, res.lower_sampled)
                        correct = int(np.argmax(pred)) == model.observed_action_idx(t)
                        kl = None
                        if t > 0:
                            kl = kl_divergence(exact_joints[t - 1], floor_smooth(res.joint))
                        recs.append(StepRecord(correct, kl, _bucket(t, T)))
                    prev_rec, prev_ev = out.get((method, fraction), ([], 0))
                    out[(method, fraction)] = (prev_rec + recs, prev_ev + counter.policy_evals)
        return out

    results = parallel_map(run_episode, list(episodes), workers)
    for per_episode in results:
        for k, (records, evals) in per_episode.items():
            key(*k).steps.extend(records)
            key(*k).policy_evals += evals

    rows: list[EvalRow] = []
    n_eps = len(episodes)
    for (method, fraction), st in sorted(stats.items()):
        rows.extend(st.accuracy_rows(method, fraction, n_eps))
        rows.extend(st.progress_rows(method, fraction, n_eps))
    return rows
