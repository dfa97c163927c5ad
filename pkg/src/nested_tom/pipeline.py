"""Dataset builders and training orchestration for the recognition nets.

Every network consumes observation-history features concatenated with the
previous step's posterior (the recurrent context).  Training uses the
exact posterior as that context (teacher forcing); at inference time the
amortized posterior from the previous restart is fed instead.  Targets
are the ground-truth goals (or next actions) from the generative
simulator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import construction as con
from . import driving as drv
from .core import Episode, make_rng
from .engine import exact_lower_rows, exact_posterior, top_marginal_of
from .errors import MissingModel
from .mlp import MlpParams, load_model, save_model
from .train import TrainConfig, TrainResult, train_recognition


def _softmax_rows(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=1, keepdims=True)
    w = np.exp(rows - m)
    return w / w.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Construction datasets
# --------------------------------------------------------------------------


def _augment_context(ctx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Randomly degrade a teacher-forced recurrent context.

    At inference time the previous-step posterior is a sparse sampled
    marginal, not the dense exact posterior; training on a mix of exact,
    sparsified, and uniform contexts keeps the network useful under that
    shift.
    """
    n = ctx.size
    r = rng.uniform()
    if r < 0.35:
        return ctx
    if r < 0.70:
        k = int(rng.integers(1, 7))
        atoms = rng.choice(n, size=min(k, n), replace=False, p=ctx)
        sparse = np.zeros(n)
        sparse[atoms] = ctx[atoms]
        total = sparse.sum()
        return sparse / total if total > 0 else np.full(n, 1.0 / n)
    return np.full(n, 1.0 / n)


def construction_level1_dataset(
    episodes: Sequence[Episode], cfg: con.ConstructionConfig, augment: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    rng = make_rng("l1-context-augment", len(episodes))
    for ep in episodes:
        model = con.ConstructionModel(ep, cfg)
        rows = _softmax_rows(exact_lower_rows(model, 0))
        goal = model.true_lower_idx()
        for t in range(1, model.T + 1):
            feats = model.lower_features(0, t)
            ctx = _augment_context(rows[t - 1], rng) if augment else rows[t - 1]
            xs.append(np.concatenate([feats, ctx]))
            ys.append(goal)
    return np.asarray(xs), np.asarray(ys, dtype=int)


def construction_level2_dataset(
    episodes: Sequence[Episode], cfg: con.ConstructionConfig
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for ep in episodes:
        model = con.ConstructionModel(ep, cfg)
        goal = model.true_top_idx()
        prev = np.full(2, 0.5)
        for t in range(1, model.T + 1):
            feats = model.top_features(t)
            xs.append(np.concatenate([feats, prev]))
            ys.append(goal)
            prev = top_marginal_of(model, exact_posterior(model, 2, t))
    return np.asarray(xs), np.asarray(ys, dtype=int)


# --------------------------------------------------------------------------
# Driving datasets
# --------------------------------------------------------------------------


def _true_slot_classes(cars: Sequence[drv.CarState], cfg: drv.DrivingConfig) -> dict:
    out: dict[tuple[int, int], int] = {}
    per_lane: dict[int, list[tuple[float, drv.CarState]]] = {}
    for car in cars:
        loc = drv.locate_car(car, cfg)
        if loc is None:
            continue
        per_lane.setdefault(loc[0], []).append((loc[1], car))
    for lane_idx, entries in per_lane.items():
        entries.sort(key=lambda e: e[0])
        for slot, (d, car) in enumerate(entries[: drv.SLOTS_PER_LANE]):
            out[(lane_idx, slot)] = drv.slot_class(d, car.v, cfg)
    return out


def driving_state_dataset(
    episodes: Sequence[Episode],
    cfg: drv.DrivingConfig,
    max_pairs: int = 30_000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot training pairs from the drivers' own observation streams."""
    xs, ys = [], []
    for ep in episodes:
        for agent in ep.agents:
            filt = drv.SlotFilter(cfg)
            for t in range(ep.length):
                payload = ep.steps[t].obs[agent.id]
                obs = drv.DrivingObservation(
                    drv.car_from_payload(payload["own"]),
                    tuple(
                        (cid, drv.car_from_payload(p)) for cid, p in payload["visible"]
                    ),
                    tuple(payload.get("honks", ())),
                    bool(payload.get("attentive", True)),
                )
                prev = filt.beliefs.copy()
                filt.step(obs)
                truth = _true_slot_classes(
                    [drv.car_from_payload(p) for p in ep.steps[t].state["cars"]
                     if p["id"] != agent.id],
                    cfg,
                )
                for lane_idx in range(drv.N_LANES):
                    for slot in range(drv.SLOTS_PER_LANE):
                        if filt.beliefs[lane_idx, slot].max() >= 1.0 - 1e-12:
                            continue  # pinned by direct sight; nothing to learn
                        feats = drv.slot_features(filt.windows[lane_idx, slot], lane_idx, slot)
                        xs.append(np.concatenate([feats, prev[lane_idx, slot]]))
                        ys.append(truth.get((lane_idx, slot), 0))
    xs = np.asarray(xs)
    ys = np.asarray(ys, dtype=int)
    if len(xs) > max_pairs:
        keep = make_rng("q0-subsample", seed).choice(len(xs), size=max_pairs, replace=False)
        keep.sort()
        xs, ys = xs[keep], ys[keep]
    return xs, ys


def driving_goal_dataset(
    episodes: Sequence[Episode],
    cfg: drv.DrivingConfig,
    level: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Goal-recognition pairs; level 1 uses the exact level-1 posterior as
    context, level 2 the exact level-2 top marginal."""
    xs, ys = [], []
    for ep in episodes:
        data = drv.DrivingEpisodeData(ep, cfg)
        for j, agent in enumerate(ep.agents):
            states = [data.cars[s][j] for s in range(data.T)]
            acts = [data.actions[s].get(agent.id) for s in range(data.T)]
            if level == 1:
                rows = data.level1_posterior_rows(j)
            else:
                model = drv.DrivingModel(data, agent.id)
                rows = np.vstack(
                    [np.full(3, 1 / 3)]
                    + [
                        top_marginal_of(model, exact_posterior(model, 2, t))
                        for t in range(1, data.T)
                    ]
                )
            for t in range(data.T):
                feats = drv.featurize_driving(states, acts, data.honk_flags, t, cfg)
                xs.append(np.concatenate([feats, rows[t - 1] if t > 0 else np.full(3, 1 / 3)]))
                ys.append(agent.goal)
    return np.asarray(xs), np.asarray(ys, dtype=int)


def driving_action_dataset(
    episodes: Sequence[Episode], cfg: drv.DrivingConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Next-action pairs for the end-to-end baseline; the recurrent context
    is the previous observed action."""
    xs, ys = [], []
    for ep in episodes:
        data = drv.DrivingEpisodeData(ep, cfg)
        for j, agent in enumerate(ep.agents):
            states = [data.cars[s][j] for s in range(data.T)]
            acts = [data.actions[s].get(agent.id) for s in range(data.T)]
            for t in range(data.T):
                feats = drv.featurize_driving(states, acts, data.honk_flags, t, cfg)
                prev = np.full(5, 0.2)
                if t > 0 and acts[t - 1] is not None:
                    prev = np.zeros(5)
                    prev[drv.ACTIONS.index(acts[t - 1])] = 1.0
                xs.append(np.concatenate([feats, prev]))
                ys.append(drv.ACTIONS.index(acts[t]))
    return np.asarray(xs), np.asarray(ys, dtype=int)


# --------------------------------------------------------------------------
# checkpoint bundle
# --------------------------------------------------------------------------

CHECKPOINT_NAMES = {
    "construction_l1": "construction_l1.json",
    "construction_l2": "construction_l2.json",
    "driving_q0": "driving_q0.json",
    "driving_q1": "driving_q1.json",
    "driving_q2": "driving_q2.json",
    "driving_tomnet": "driving_tomnet.json",
}


@dataclass
class ModelBundle:
    construction_l1: Optional[MlpParams] = None
    construction_l2: Optional[MlpParams] = None
    driving_q0: Optional[MlpParams] = None
    driving_q1: Optional[MlpParams] = None
    driving_q2: Optional[MlpParams] = None
    driving_tomnet: Optional[MlpParams] = None

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for key, fname in CHECKPOINT_NAMES.items():
            params = getattr(self, key)
            if params is not None:
                save_model(params, out / fname)

    @staticmethod
    def load(out_dir: str | Path, required: Sequence[str] = ()) -> "ModelBundle":
        out = Path(out_dir)
        bundle = ModelBundle()
        for key, fname in CHECKPOINT_NAMES.items():
            path = out / fname
            if path.exists():
                setattr(bundle, key, load_model(path))
            elif key in required:
                raise MissingModel(f"required checkpoint {fname} not found in {out}")
        return bundle

    def require(self, *keys: str) -> None:
        for key in keys:
            if getattr(self, key) is None:
                raise MissingModel(f"checkpoint {key} is required but was not trained/loaded")


def default_train_config(name: str, seed: int) -> TrainConfig:
    base = {
        "construction_l1": TrainConfig(hidden_sizes=(128, 128), epochs=30, seed=seed),
        "construction_l2": TrainConfig(hidden_sizes=(64, 64), epochs=20, seed=seed + 1),
        "driving_q0": TrainConfig(hidden_sizes=(64,), epochs=8, seed=seed + 2),
        "driving_q1": TrainConfig(hidden_sizes=(128, 128), epochs=25, seed=seed + 3),
        "driving_q2": TrainConfig(hidden_sizes=(128, 128), epochs=25, seed=seed + 4),
        "driving_tomnet": TrainConfig(hidden_sizes=(128, 128), epochs=25, seed=seed + 5),
    }
    return base[name]


def train_construction_models(
    s1: Sequence[Episode],
    s2: Sequence[Episode],
    cfg: con.ConstructionConfig,
    out_dir: str | Path,
    seed: int = 0,
    overrides: Optional[dict[str, TrainConfig]] = None,
) -> ModelBundle:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overrides = overrides or {}
    bundle = ModelBundle()

    x1, y1 = construction_level1_dataset(s1, cfg)
    res1 = train_recognition(x1, y1, cfg.n_goals,
                             overrides.get("construction_l1",
                                           default_train_config("construction_l1", seed)))
    res1.write_curve(out / "construction_l1_curve.csv")
    bundle.construction_l1 = res1.params

    x2, y2 = construction_level2_dataset(s2, cfg)
    res2 = train_recognition(x2, y2, 2,
                             overrides.get("construction_l2",
                                           default_train_config("construction_l2", seed)))
    res2.write_curve(out / "construction_l2_curve.csv")
    bundle.construction_l2 = res2.params
    bundle.save(out)
    return bundle


def train_driving_models(
    s0: Sequence[Episode],
    s1: Sequence[Episode],
    s2: Sequence[Episode],
    cfg: drv.DrivingConfig,
    out_dir: str | Path,
    seed: int = 0,
    overrides: Optional[dict[str, TrainConfig]] = None,
) -> ModelBundle:
    """Level-wise training: the state net from S0, the level-1 goal net
    from S1, the level-2 goal net and the action baseline from S2."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overrides = overrides or {}
    bundle = ModelBundle()

    x0, y0 = driving_state_dataset(s0, cfg, seed=seed)
    res0 = train_recognition(x0, y0, drv.N_SLOT_CLASSES,
                             overrides.get("driving_q0", default_train_config("driving_q0", seed)))
    res0.write_curve(out / "driving_q0_curve.csv")
    bundle.driving_q0 = res0.params

    x1, y1 = driving_goal_dataset(s1, cfg, level=1)
    res1 = train_recognition(x1, y1, len(drv.GOALS),
                             overrides.get("driving_q1", default_train_config("driving_q1", seed)))
    res1.write_curve(out / "driving_q1_curve.csv")
    bundle.driving_q1 = res1.params

    x2, y2 = driving_goal_dataset(s2, cfg, level=2)
    res2 = train_recognition(x2, y2, len(drv.GOALS),
                             overrides.get("driving_q2", default_train_config("driving_q2", seed)))
    res2.write_curve(out / "driving_q2_curve.csv")
    bundle.driving_q2 = res2.params

    xa, ya = driving_action_dataset(s2, cfg)
    resa = train_recognition(xa, ya, len(drv.ACTIONS),
                             overrides.get("driving_tomnet",
                                           default_train_config("driving_tomnet", seed)))
    resa.write_curve(out / "driving_tomnet_curve.csv")
    bundle.driving_tomnet = resa.params
    bundle.save(out)
    return bundle
