"""Construction grid world: two agents, ten blocks, help-or-hinder goals.

Alice (level 0) wants a specific pair of blocks placed next to each other;
Bob (level 1) wants to help or hinder her without knowing her goal, so he
infers it from her actions.  A level-2 observer infers Bob's goal, which
requires reproducing Bob's inference about Alice.

The world is fully observable and deterministic.  Fetch distances for the
planners come from breadth-first-search fields that treat uncarried blocks
as obstacles (an empty-handed agent entering a block cell picks it up, so
an optimal fetch path routes around the others); while carrying, an agent
passes over blocks freely, so the carry leg is plain Manhattan distance.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    AgentRole,
    DEFAULT_BETA,
    DEFAULT_FLOOR,
    Episode,
    EpisodeStep,
    PolicyDistribution,
    boltzmann_policy,
    make_rng,
)
from .errors import IllegalAction
from .spaces import HypothesisSpace

ACTIONS = ("U", "D", "L", "R", "P")
MOVES = {"U": (0, -1), "D": (0, 1), "L": (-1, 0), "R": (1, 0)}
ALICE = "alice"
BOB = "bob"
BOB_GOALS = ("help", "hinder")
UNREACHABLE = 10_000.0
COST_CLIP = 200.0
ILLEGAL_VALUE = -1e4
FEATURE_ACTION_WINDOW = 4


@dataclass(frozen=True)
class ConstructionConfig:
    width: int = 20
    height: int = 20
    n_blocks: int = 10
    beta: float = DEFAULT_BETA
    floor: float = DEFAULT_FLOOR
    t_max: int = 60
    # weight of Bob's approach-shaping term; pure one-step lookahead has no
    # gradient while Bob is empty-handed, so both goals reward closing in on
    # an uncarried goal block (the helper to deliver it, the hinderer to
    # take it away)
    shaping_weight: float = 1.2

    @property
    def n_goals(self) -> int:
        return self.n_blocks * (self.n_blocks - 1) // 2

    def goal_pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple(itertools.combinations(range(self.n_blocks), 2))


@dataclass(frozen=True)
class GridState:
    width: int
    height: int
    agent_pos: tuple[tuple[str, int, int], ...]  # (id, x, y), sorted by id
    block_pos: tuple[tuple[int, int], ...]  # indexed by block id
    carried_by: tuple[Optional[str], ...]  # agent id or None per block

    def __post_init__(self) -> None:
        for _, x, y in self.agent_pos:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError("agent out of bounds")
        for x, y in self.block_pos:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError("block out of bounds")
        carriers = [a for a in self.carried_by if a is not None]
        if len(carriers) != len(set(carriers)):
            raise ValueError("an agent carries more than one block")

    def agents(self) -> tuple[str, ...]:
        return tuple(a for a, _, _ in self.agent_pos)

    def pos_of(self, agent: str) -> tuple[int, int]:
        for a, x, y in self.agent_pos:
            if a == agent:
                return (x, y)
        raise KeyError(agent)

    def carrying(self, agent: str) -> Optional[int]:
        for b, carrier in enumerate(self.carried_by):
            if carrier == agent:
                return b
        return None

    def uncarried_cells(self) -> set[tuple[int, int]]:
        return {
            self.block_pos[b]
            for b in range(len(self.block_pos))
            if self.carried_by[b] is None
        }


def state_payload(state: GridState) -> dict:
    return {
        "agents": [
            {"id": a, "x": x, "y": y, "carrying": state.carrying(a)}
            for a, x, y in state.agent_pos
        ],
        "blocks": [
            {"id": b, "x": x, "y": y, "carried_by": state.carried_by[b]}
            for b, (x, y) in enumerate(state.block_pos)
        ],
    }


def state_from_payload(payload: dict, cfg: ConstructionConfig) -> GridState:
    agents = tuple(sorted((a["id"], int(a["x"]), int(a["y"])) for a in payload["agents"]))
    blocks = sorted(payload["blocks"], key=lambda b: b["id"])
    return GridState(
        width=cfg.width,
        height=cfg.height,
        agent_pos=agents,
        block_pos=tuple((int(b["x"]), int(b["y"])) for b in blocks),
        carried_by=tuple(b["carried_by"] for b in blocks),
    )


def step(state: GridState, actions: dict[str, str]) -> GridState:
    """Simultaneous deterministic transition.

    Out-of-bounds moves are no-ops.  An empty-handed agent entering a cell
    that holds an uncarried block picks it up (mandatory).  PutDown places
    the carried block at the agent's cell unless another block already
    sits there (then it is a no-op) and raises IllegalAction when the
    agent carries nothing.  Carried blocks move with their carrier; agents
    may co-occupy a cell.
    """
    for agent, action in actions.items():
        if action not in ACTIONS:
            raise IllegalAction(f"unknown action {action!r}")
        if action == "P" and state.carrying(agent) is None:
            raise IllegalAction(f"{agent} cannot put down: carrying nothing")

    new_pos: dict[str, tuple[int, int]] = {}
    for agent, x, y in state.agent_pos:
        action = actions.get(agent)
        if action in MOVES:
            dx, dy = MOVES[action]
            nx, ny = x + dx, y + dy
            new_pos[agent] = (nx, ny) if 0 <= nx < state.width and 0 <= ny < state.height else (x, y)
        else:
            new_pos[agent] = (x, y)

    block_pos = list(state.block_pos)
    carried_by = list(state.carried_by)

    for b, carrier in enumerate(carried_by):
        if carrier is not None:
            block_pos[b] = new_pos[carrier]

    # put-downs resolve before pickups; dropping onto another block is a no-op
    for agent in sorted(actions):
        if actions[agent] == "P":
            b = state.carrying(agent)
            cell = new_pos[agent]
            occupied = any(
                block_pos[o] == cell and carried_by[o] is None
                for o in range(len(block_pos))
                if o != b
            )
            if not occupied:
                carried_by[b] = None
                block_pos[b] = cell

    # mandatory pickups by empty-handed agents that moved onto a free block
    for agent in sorted(new_pos):
        if actions.get(agent) not in MOVES or new_pos[agent] == state.pos_of(agent):
            continue
        if any(carrier == agent for carrier in carried_by):
            continue
        for b in range(len(block_pos)):
            if carried_by[b] is None and block_pos[b] == new_pos[agent]:
                carried_by[b] = agent
                break

    agents = tuple(sorted((a, new_pos[a][0], new_pos[a][1]) for a in new_pos))
    return GridState(state.width, state.height, agents, tuple(block_pos), tuple(carried_by))


def goal_satisfied(state: GridState, pair: tuple[int, int]) -> bool:
    """True iff both blocks are uncarried and 4-adjacent."""
    i, j = pair
    if state.carried_by[i] is not None or state.carried_by[j] is not None:
        return False
    (xi, yi), (xj, yj) = state.block_pos[i], state.block_pos[j]
    return abs(xi - xj) + abs(yi - yj) == 1


def _neighbors(x: int, y: int, width: int, height: int):
    for dx, dy in MOVES.values():
        nx, ny = x + dx, y + dy
        if 0 <= nx < width and 0 <= ny < height:
            yield nx, ny


def bfs_field(
    width: int,
    height: int,
    sources: Sequence[tuple[int, int]],
    obstacles: set[tuple[int, int]],
) -> np.ndarray:
    """(height, width) grid distances from the nearest source; obstacles impassable."""
    dist = np.full((height, width), np.inf)
    blocked = np.zeros((height, width), dtype=bool)
    for x, y in obstacles:
        blocked[y, x] = True
    for x, y in sources:
        if not blocked[y, x]:
            dist[y, x] = 0.0
    while True:
        shifted = np.full_like(dist, np.inf)
        shifted[1:, :] = np.minimum(shifted[1:, :], dist[:-1, :] + 1)
        shifted[:-1, :] = np.minimum(shifted[:-1, :], dist[1:, :] + 1)
        shifted[:, 1:] = np.minimum(shifted[:, 1:], dist[:, :-1] + 1)
        shifted[:, :-1] = np.minimum(shifted[:, :-1], dist[:, 1:] + 1)
        shifted[blocked] = np.inf
        new = np.minimum(dist, shifted)
        if np.array_equal(new, dist, equal_nan=True):
            return dist
        dist = new


class ApproachFields:
    """Per-block BFS fields: distance to a free cell adjacent to the block.

    Computed lazily against one root state's obstacle layout (uncarried
    blocks).  One-step-lookahead successors reuse the root fields: pickups
    between root and successor switch the cost-case analysis instead of
    the field, which keeps the fetch-and-carry plan cost exact.
    """

    def __init__(self, state: GridState):
        self.state = state
        self.obstacles = state.uncarried_cells()
        self._fields: dict[int, np.ndarray] = {}

    def field(self, block: int) -> np.ndarray:
        if block not in self._fields:
            bx, by = self.state.block_pos[block]
            sources = [
                c
                for c in _neighbors(bx, by, self.state.width, self.state.height)
                if c not in self.obstacles
            ]
            self._fields[block] = bfs_field(
                self.state.width, self.state.height, sources, self.obstacles
            )
        return self._fields[block]


def remaining_cost(
    state: GridState,
    agent: str,
    pair: tuple[int, int],
    fields: Optional[ApproachFields] = None,
) -> float:
    """Minimal remaining steps for `agent` to satisfy the block pair.

    Plan shape: fetch one goal block (BFS around the other blocks), carry
    it to a free cell adjacent to the other goal block (Manhattan), put it
    down.  Returns the UNREACHABLE sentinel when no plan exists, kept
    finite so downstream softmaxes stay well defined.
    """
    if goal_satisfied(state, pair):
        return 0.0
    if fields is None:
        fields = ApproachFields(state)
    i, j = pair
    p = state.pos_of(agent)
    carrying = state.carrying(agent)

    def drop_min(from_pos: tuple[int, int], target: int, picked: int) -> float:
        # nearest free cell adjacent to the target; the picked block's own
        # cell frees up once it is carried
        tx, ty = state.block_pos[target]
        occupied = {
            state.block_pos[b]
            for b in range(len(state.block_pos))
            if state.carried_by[b] is None and b != picked and b != target
        }
        best = np.inf
        for cell in _neighbors(tx, ty, state.width, state.height):
            if cell in occupied:
                continue
            best = min(best, abs(from_pos[0] - cell[0]) + abs(from_pos[1] - cell[1]))
        return best

    if carrying == i or carrying == j:
        target = j if carrying == i else i
        cost = drop_min(p, target, carrying) + 1.0
        return float(cost) if np.isfinite(cost) else UNREACHABLE
    if carrying is not None:
        # stray block in hand: drop it here (one extra step if this cell
        # is taken), then plan empty-handed with it on the ground
        occupied_here = any(
            state.block_pos[b] == p and state.carried_by[b] is None
            for b in range(len(state.block_pos))
        )
        dropped = GridState(
            state.width,
            state.height,
            state.agent_pos,
            tuple(p if b == carrying else bp for b, bp in enumerate(state.block_pos)),
            tuple(None if b == carrying else c for b, c in enumerate(state.carried_by)),
        )
        penalty = 2.0 if occupied_here else 1.0
        rest = remaining_cost(dropped, agent, pair, fields)
        return float(min(UNREACHABLE, penalty + rest))

    def route(x_block: int, y_block: int) -> float:
        if state.carried_by[x_block] is not None:
            return np.inf  # held by the other agent; cannot be taken
        bx, by = state.block_pos[x_block]
        if p == (bx, by):
            approach = 2.0  # step off and re-enter to trigger the pickup
        else:
            approach = fields.field(x_block)[p[1], p[0]] + 1.0
        carry = drop_min((bx, by), y_block, x_block)
        return approach + carry + 1.0

    best = min(route(i, j), route(j, i))
    return float(best) if np.isfinite(best) else UNREACHABLE


def bfs_cost_to_go(
    state: GridState,
    agent: str,
    pair: tuple[int, int],
    fields: Optional[ApproachFields] = None,
) -> np.ndarray:
    """Per-action costs: 1 + remaining steps from the successor state.

    When the goal is already satisfied, actions that keep it satisfied
    cost 0 (terminal; the policy is near uniform over them).  PutDown
    while empty-handed gets the unreachable sentinel.
    """
    if fields is None:
        fields = ApproachFields(state)
    satisfied = goal_satisfied(state, pair)
    costs = np.empty(len(ACTIONS))
    for k, action in enumerate(ACTIONS):
        if action == "P" and state.carrying(agent) is None:
            costs[k] = UNREACHABLE
            continue
        succ = step(state, {agent: action})
        if goal_satisfied(succ, pair):
            costs[k] = 0.0 if satisfied else 1.0
        else:
            costs[k] = 1.0 + remaining_cost(succ, agent, pair, fields)
    return costs


def alice_policy(
    state: GridState,
    pair: tuple[int, int],
    beta: float = DEFAULT_BETA,
    floor: float = DEFAULT_FLOOR,
    fields: Optional[ApproachFields] = None,
) -> PolicyDistribution:
    """Boltzmann over negated cost-to-go; Alice ignores Bob entirely."""
    costs = bfs_cost_to_go(state, ALICE, pair, fields)
    values = -np.minimum(costs, COST_CLIP)
    values[costs >= UNREACHABLE] = ILLEGAL_VALUE
    return boltzmann_policy(values, beta, floor)


def _bob_shaping(succ: GridState, pair: tuple[int, int]) -> float:
    """Distance from Bob to the nearest uncarried goal block of the pair.

    Zero while Bob carries one of the pair (the cost term itself then
    responds to his movement) or when neither block can be approached.
    """
    carrying = succ.carrying(BOB)
    if carrying in pair:
        return 0.0
    bx, by = succ.pos_of(BOB)
    dists = [
        abs(bx - succ.block_pos[b][0]) + abs(by - succ.block_pos[b][1])
        for b in pair
        if succ.carried_by[b] is None
    ]
    return float(min(dists)) if dists else 0.0


def completion_cost(
    state: GridState, pair: tuple[int, int], fields: Optional[ApproachFields] = None
) -> float:
    """Steps until the pair is assembled by whichever agent finishes first.

    A helping Bob scores his actions against this team completion cost,
    so he delivers a carried block himself whenever he is the closer
    agent.  A hindering Bob scores against Alice's solo cost alone
    (holding a goal block hostage and walking it away keeps raising it).
    The two utilities have matching approach gradients while Bob is
    empty-handed and far away, which keeps early behavior ambiguous.
    """
    if fields is None:
        fields = ApproachFields(state)
    cost = remaining_cost(state, ALICE, pair, fields)
    if any(agent == BOB for agent, _, _ in state.agent_pos):
        cost = min(cost, remaining_cost(state, BOB, pair, fields))
    return cost


class StepTensors:
    """All planner quantities for one state, vectorized over goal pairs.

    alice_cost[g, a]: cost-to-go of Alice action a under pair g.
    bob_cost[a, g]:   Alice's optimal-play cost after Bob plays a alone.
    bob_shape[a, g]:  Bob's approach distance after playing a.
    bob_legal[a]:     False for PutDown while Bob carries nothing.
    """

    def __init__(self, state: GridState, cfg: ConstructionConfig, with_bob: bool):
        self.cfg = cfg
        pairs = cfg.goal_pairs()
        fields = ApproachFields(state)
        G = len(pairs)
        self.alice_cost = np.full((G, len(ACTIONS)), UNREACHABLE)
        alice_carrying = state.carrying(ALICE) is not None
        satisfied = np.array([goal_satisfied(state, pr) for pr in pairs])
        for k, action in enumerate(ACTIONS):
            if action == "P" and not alice_carrying:
                continue
            succ = step(state, {ALICE: action})
            for g, pr in enumerate(pairs):
                if goal_satisfied(succ, pr):
                    self.alice_cost[g, k] = 0.0 if satisfied[g] else 1.0
                else:
                    self.alice_cost[g, k] = 1.0 + remaining_cost(succ, ALICE, pr, fields)
        self.bob_cost_help = None
        self.bob_cost_hinder = None
        self.bob_shape = None
        self.bob_legal = None
        if with_bob:
            self.bob_cost_help = np.zeros((len(ACTIONS), G))
            self.bob_cost_hinder = np.zeros((len(ACTIONS), G))
            self.bob_shape = np.zeros((len(ACTIONS), G))
            self.bob_legal = np.ones(len(ACTIONS), dtype=bool)
            for k, action in enumerate(ACTIONS):
                if action == "P" and state.carrying(BOB) is None:
                    self.bob_legal[k] = False
                    continue
                succ = step(state, {BOB: action})
                carrying = succ.carrying(BOB)
                for g, pr in enumerate(pairs):
                    solo = min(remaining_cost(succ, ALICE, pr, fields), COST_CLIP)
                    # a helper who holds a goal block may finish the job
                    # himself; otherwise both goals score Alice's own cost,
                    # which keeps empty-handed behavior ambiguous
                    if carrying in pr:
                        team = min(remaining_cost(succ, BOB, pr, fields), COST_CLIP)
                        self.bob_cost_help[k, g] = min(solo, team)
                    else:
                        self.bob_cost_help[k, g] = solo
                    self.bob_cost_hinder[k, g] = solo
                    self.bob_shape[k, g] = _bob_shaping(succ, pr)

    def alice_probs(self, beta: float, floor: float) -> np.ndarray:
        """(G, actions) Alice policy rows for every goal pair."""
        values = -np.minimum(self.alice_cost, COST_CLIP)
        values[self.alice_cost >= UNREACHABLE] = ILLEGAL_VALUE
        scaled = beta * values
        scaled -= scaled.max(axis=1, keepdims=True)
        soft = np.exp(scaled)
        soft /= soft.sum(axis=1, keepdims=True)
        probs = (1.0 - floor * len(ACTIONS)) * soft + floor
        return probs / probs.sum(axis=1, keepdims=True)

    def bob_values(
        self, belief_idx: np.ndarray, belief_probs: np.ndarray, goal: str
    ) -> np.ndarray:
        """Expected utilities of Bob's actions under one goal and belief."""
        b = np.asarray(belief_probs)
        if goal == "help":
            values = -(self.bob_cost_help[:, belief_idx] @ b)
        else:
            values = self.bob_cost_hinder[:, belief_idx] @ b
        values = values - self.cfg.shaping_weight * (self.bob_shape[:, belief_idx] @ b)
        return np.where(self.bob_legal, values, ILLEGAL_VALUE)

    def bob_probs(
        self, belief_idx: np.ndarray, belief_probs: np.ndarray, goal: str,
        beta: float, floor: float,
    ) -> np.ndarray:
        """Bob policy row for one goal given a (possibly sparse) belief."""
        values = self.bob_values(belief_idx, belief_probs, goal)
        scaled = beta * values
        scaled -= scaled.max()
        soft = np.exp(scaled)
        soft /= soft.sum()
        probs = (1.0 - floor * len(ACTIONS)) * soft + floor
        return probs / probs.sum()


def bob_policy(
    state: GridState,
    belief_idx: np.ndarray,
    belief_probs: np.ndarray,
    goal: str,
    cfg: ConstructionConfig,
    tensors: Optional[StepTensors] = None,
) -> PolicyDistribution:
    """Expected one-step-lookahead utility policy for Bob.

    Each action is applied alone; the utility is the belief-weighted
    optimal-play cost Alice then faces, negated when helping.
    """
    if tensors is None:
        tensors = StepTensors(state, cfg, with_bob=True)
    return PolicyDistribution(
        tensors.bob_probs(belief_idx, belief_probs, goal, cfg.beta, cfg.floor)
    )


# --------------------------------------------------------------------------
# featurization
# --------------------------------------------------------------------------


def feature_length(cfg: ConstructionConfig, target_level: int) -> int:
    base = 2 + 4 * cfg.n_blocks + 5 * FEATURE_ACTION_WINDOW + 1
    if target_level >= 2:
        base += 2 + 5 * FEATURE_ACTION_WINDOW
    return base


def featurize(
    states: Sequence[GridState],
    actions: Sequence[dict[str, str]],
    t: int,
    cfg: ConstructionConfig,
    target_level: int,
) -> np.ndarray:
    """Fixed-length encoding of a t-step prefix.

    Level 1 (inferring Alice's goal) encodes Alice and the blocks only, so
    the same network applies with or without Bob in the episode.  Level 2
    adds Bob's position and recent actions.  The last few actions are
    one-hot with zero padding for early steps; coordinates are normalized
    by the grid size (the encoding is not translation invariant).
    """
    idx = min(t, len(states) - 1)
    state = states[idx]
    w, h = float(cfg.width), float(cfg.height)
    parts: list[np.ndarray] = []
    ax, ay = state.pos_of(ALICE)
    parts.append(np.array([ax / w, ay / h]))
    blocks = np.zeros(4 * cfg.n_blocks)
    for b in range(cfg.n_blocks):
        bx, by = state.block_pos[b]
        blocks[4 * b : 4 * b + 4] = [
            bx / w,
            by / h,
            1.0 if state.carried_by[b] == ALICE else 0.0,
            1.0 if state.carried_by[b] == BOB else 0.0,
        ]
    parts.append(blocks)

    def action_window(agent: str) -> np.ndarray:
        out = np.zeros(5 * FEATURE_ACTION_WINDOW)
        recent = actions[max(0, t - FEATURE_ACTION_WINDOW) : t]
        for slot, act in enumerate(reversed(recent)):
            if agent in act:
                out[5 * slot + ACTIONS.index(act[agent])] = 1.0
        return out

    parts.append(action_window(ALICE))
    parts.append(np.array([min(t, cfg.t_max) / cfg.t_max]))
    if target_level >= 2:
        if any(a == BOB for a, _, _ in state.agent_pos):
            bx, by = state.pos_of(BOB)
            parts.append(np.array([bx / w, by / h]))
        else:
            parts.append(np.zeros(2))
        parts.append(action_window(BOB))
    return np.concatenate(parts)


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------


def spawn_state(cfg: ConstructionConfig, rng: np.random.Generator, with_bob: bool) -> GridState:
    cells = [(x, y) for x in range(cfg.width) for y in range(cfg.height)]
    chosen = rng.choice(len(cells), size=cfg.n_blocks + (2 if with_bob else 1), replace=False)
    block_cells = [cells[i] for i in chosen[: cfg.n_blocks]]
    agent_cells = [cells[i] for i in chosen[cfg.n_blocks :]]
    agents = [(ALICE, agent_cells[0][0], agent_cells[0][1])]
    if with_bob:
        agents.append((BOB, agent_cells[1][0], agent_cells[1][1]))
    return GridState(
        cfg.width,
        cfg.height,
        tuple(sorted(agents)),
        tuple(block_cells),
        tuple([None] * cfg.n_blocks),
    )


def _sample_action(
    probs: np.ndarray, state: GridState, agent: str, rng: np.random.Generator
) -> str:
    # the policy keeps floor mass on illegal put-downs; redraw those
    for _ in range(8):
        a = ACTIONS[int(rng.choice(len(ACTIONS), p=probs))]
        if a != "P" or state.carrying(agent) is not None:
            return a
    return "U"


def synthesize_episodes(
    cfg: ConstructionConfig, kind: str, count: int, seed: int
) -> list[Episode]:
    """Generate episodes by sampling the agents' policies.

    S1 spawns Alice alone; S2 and test kinds add Bob, who re-infers
    Alice's goal every step by exact enumeration and acts on his help or
    hinder goal.  Episodes stop at goal satisfaction or after t_max
    steps.  Bit-identical for identical (cfg, kind, count, seed).
    """
    if kind not in ("s1", "s2", "test"):
        raise ValueError(f"unknown construction kind {kind!r}")
    with_bob = kind != "s1"
    pairs = cfg.goal_pairs()
    episodes = []
    for i in range(count):
        ep_seed = int(make_rng("construction", kind, seed, i).integers(0, 2**31 - 1))
        rng = make_rng("construction-episode", ep_seed)
        state = spawn_state(cfg, rng, with_bob)
        goal_idx = int(rng.integers(0, len(pairs)))
        for _ in range(20):
            if not goal_satisfied(state, pairs[goal_idx]):
                break
            goal_idx = int(rng.integers(0, len(pairs)))
        bob_goal_idx = int(rng.integers(0, 2)) if with_bob else 0

        log_lik = np.zeros(len(pairs))  # Bob's running evidence about Alice's goal
        steps: list[EpisodeStep] = []
        for _t in range(cfg.t_max):
            tensors = StepTensors(state, cfg, with_bob)
            alice_rows = tensors.alice_probs(cfg.beta, cfg.floor)
            actions = {ALICE: _sample_action(alice_rows[goal_idx], state, ALICE, rng)}
            if with_bob:
                belief = np.exp(log_lik - log_lik.max())
                belief /= belief.sum()
                bob_probs = tensors.bob_probs(
                    np.arange(len(pairs)), belief, BOB_GOALS[bob_goal_idx],
                    cfg.beta, cfg.floor,
                )
                actions[BOB] = _sample_action(bob_probs, state, BOB, rng)
            obs = {agent: "full" for agent in state.agents()}
            steps.append(EpisodeStep(state_payload(state), dict(actions), obs))

            if with_bob:
                a_obs = ACTIONS.index(actions[ALICE])
                log_lik += np.log(alice_rows[:, a_obs])
            state = step(state, actions)
            if goal_satisfied(state, pairs[goal_idx]):
                break

        agents = [AgentRole(ALICE, 0, goal_idx)]
        if with_bob:
            agents.append(AgentRole(BOB, 1, bob_goal_idx))
        episodes.append(
            Episode(
                env="construction",
                seed=ep_seed,
                kind=kind,
                agents=tuple(agents),
                steps=tuple(steps),
            )
        )
    return episodes


# --------------------------------------------------------------------------
# per-episode inference model
# --------------------------------------------------------------------------


class ConstructionModel:
    """Cached likelihood tensors for one recorded episode.

    Lower source 0 is Alice (goal pairs); the top agent is Bob with goals
    (help, hinder).  The joint space orders hypotheses Bob-major:
    id = bob_goal * n_pairs + alice_pair.
    """

    def __init__(self, episode: Episode, cfg: ConstructionConfig):
        self.episode = episode
        self.cfg = cfg
        self.episode_id = f"construction-{episode.kind}-{episode.seed}"
        self.pairs = cfg.goal_pairs()
        self.T = episode.length
        self.lower_spaces = (HypothesisSpace(1, tuple(range(len(self.pairs))), "alice-goal"),)
        self.top_space = HypothesisSpace(2, tuple(range(len(BOB_GOALS))), "bob-goal")
        self.joint_space = HypothesisSpace(
            2,
            tuple(itertools.product(range(len(BOB_GOALS)), range(len(self.pairs)))),
            "bob-goal x alice-goal",
        )
        self.n_actions = len(ACTIONS)
        self.states = [state_from_payload(s.state, cfg) for s in episode.steps]
        self.actions = [s.actions for s in episode.steps]
        self.has_bob = any(a.id == BOB for a in episode.agents)
        self._lower: Optional[np.ndarray] = None
        self._bob_cost: Optional[dict[str, np.ndarray]] = None  # goal -> (T, 5, G)
        self._bob_shape: Optional[np.ndarray] = None  # (T, 5, G)
        self._bob_legal: Optional[np.ndarray] = None  # (T, 5)

    def _build(self) -> None:
        if self._lower is not None:
            return
        T, G = self.T, len(self.pairs)
        lower = np.zeros((T, G))
        bob_cost = {"help": np.zeros((T, 5, G)), "hinder": np.zeros((T, 5, G))}
        bob_shape = np.zeros((T, 5, G))
        bob_legal = np.ones((T, 5), dtype=bool)
        for t, state in enumerate(self.states):
            tensors = StepTensors(state, self.cfg, self.has_bob)
            if ALICE in self.actions[t]:
                rows = tensors.alice_probs(self.cfg.beta, self.cfg.floor)
                lower[t] = np.log(rows[:, ACTIONS.index(self.actions[t][ALICE])])
            if self.has_bob:
                bob_cost["help"][t] = tensors.bob_cost_help
                bob_cost["hinder"][t] = tensors.bob_cost_hinder
                bob_shape[t] = tensors.bob_shape
                bob_legal[t] = tensors.bob_legal
        self._lower = lower
        self._bob_cost = bob_cost
        self._bob_shape = bob_shape
        self._bob_legal = bob_legal

    # -- engine surface ------------------------------------------------------

    def lower_loglik(self, source: int) -> np.ndarray:
        assert source == 0
        self._build()
        return self._lower

    def _bob_prob_rows(self, upto: int, top_idx: int, idx: np.ndarray,
                       beliefs: np.ndarray) -> np.ndarray:
        """(upto, 5) Bob policy rows under one goal and a belief trajectory."""
        self._build()
        goal = BOB_GOALS[top_idx]
        sign = -1.0 if goal == "help" else 1.0
        cost = self._bob_cost[goal][:upto][:, :, idx]  # (t, 5, N)
        shape = self._bob_shape[:upto][:, :, idx]
        values = sign * np.einsum("tan,tn->ta", cost, beliefs[:upto])
        values -= self.cfg.shaping_weight * np.einsum("tan,tn->ta", shape, beliefs[:upto])
        values = np.where(self._bob_legal[:upto], values, ILLEGAL_VALUE)
        scaled = self.cfg.beta * values
        scaled -= scaled.max(axis=1, keepdims=True)
        soft = np.exp(scaled)
        soft /= soft.sum(axis=1, keepdims=True)
        probs = (1.0 - self.cfg.floor * 5) * soft + self.cfg.floor
        return probs / probs.sum(axis=1, keepdims=True)

    def top_loglik_sum(self, t, top_idx, trajs) -> float:
        if not self.has_bob or t == 0:
            return 0.0
        idx, beliefs = trajs[0]
        rows = self._bob_prob_rows(t, top_idx, np.asarray(idx), beliefs)
        obs = np.array([ACTIONS.index(self.actions[s][BOB]) for s in range(t)])
        return float(np.log(rows[np.arange(t), obs]).sum())

    def predict_policy(self, t, top_idx, beliefs) -> np.ndarray:
        self._build()
        idx, probs = beliefs[0]
        idx = np.asarray(idx)
        b = np.asarray(probs)
        goal = BOB_GOALS[top_idx]
        sign = -1.0 if goal == "help" else 1.0
        values = sign * (self._bob_cost[goal][t][:, idx] @ b)
        values -= self.cfg.shaping_weight * (self._bob_shape[t][:, idx] @ b)
        values = np.where(self._bob_legal[t], values, ILLEGAL_VALUE)
        return boltzmann_policy(values, self.cfg.beta, self.cfg.floor).probs

    def lower_features(self, source: int, t: int) -> np.ndarray:
        return featurize(self.states, self.actions, t, self.cfg, target_level=1)

    def top_features(self, t: int) -> np.ndarray:
        return featurize(self.states, self.actions, t, self.cfg, target_level=2)

    # -- harness metadata ------------------------------------------------------

    def true_top_idx(self) -> int:
        return self.episode.agent(BOB).goal

    def true_lower_idx(self, source: int = 0) -> int:
        return self.episode.agent(ALICE).goal


def build_model(episode: Episode, cfg: Optional[ConstructionConfig] = None) -> ConstructionModel:
    return ConstructionModel(episode, cfg or ConstructionConfig())
