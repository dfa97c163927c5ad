"""Four-way intersection driving world with occlusion and danger signaling.

Two perpendicular two-way roads cross at the origin; four corner buildings
block sight lines.  Eight lanes (four arms, inbound and outbound) carry up
to two tracked cars each, ordered by distance to the intersection.  Cars
follow unicycle kinematics with five actions: accelerate, brake, rotate
left, rotate right, honk.

Drivers only see cars inside their field of view and not occluded by
buildings or other cars.  A level-0 driver tracks a discretized belief
over occluded lane slots and plans against it; a level-1 driver also
infers the goals of cars it can see, simulates what those drivers can see,
and honks when it believes a driver is about to cross another car it is
unaware of.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    AgentRole,
    DEFAULT_BETA,
    DEFAULT_FLOOR,
    Episode,
    EpisodeStep,
    make_rng,
)
from .errors import MissingModel
from .spaces import HypothesisSpace

GOALS = ("forward", "left", "right")
ACTIONS = ("A", "B", "L", "R", "H")
ARMS = ("N", "E", "S", "W")
N_LANES = 8
SLOTS_PER_LANE = 2
N_SLOT_CLASSES = 13  # absent + 4 distance bins x 3 speed bins


def wrap_angle(a: float) -> float:
    return float((a + math.pi) % (2 * math.pi) - math.pi)


@dataclass(frozen=True)
class DrivingConfig:
    lane_offset: float = 2.0
    box_half: float = 4.0
    road_len: float = 40.0
    building_margin: float = 2.5
    fov_half_deg: float = 60.0
    fov_range: float = 40.0
    car_radius: float = 1.0
    collision_radius: float = 1.0
    conflict_radius: float = 2.5
    horizon: int = 8
    dt: float = 0.5
    a_lin: float = 2.0
    omega: float = math.pi / 6
    v_max: float = 6.0
    v_turn: float = 1.5
    heading_tol: float = 0.35
    slow_zone: float = 6.0
    beta: float = DEFAULT_BETA
    floor: float = DEFAULT_FLOOR
    risk_weight: float = 4.0
    progress_reward: float = 0.5
    stop_penalty: float = 0.1
    signal_score: float = 1.5
    signal_threshold: float = 0.4
    danger_nominal_speed: float = 3.0
    p_aware: float = 0.3
    existence_prior: float = 0.5
    # discount on believed-but-unseen occupancy when scoring move risk;
    # hypothetical traffic would also yield, and undiscounted phantom mass
    # paralyzes every driver at the stop line
    phantom_risk_scale: float = 0.25
    arrival_rate: float = 0.02
    speed_stay: float = 0.8
    t_max: int = 40
    dist_edges: tuple[float, ...] = (0.0, 5.0, 12.0, 22.0, 36.0)
    speed_edges: tuple[float, ...] = (0.0, 1.5, 3.5, 6.0)
    attention_steps: int = 5

    @property
    def fov_half(self) -> float:
        return math.radians(self.fov_half_deg)

    @property
    def n_dist_bins(self) -> int:
        return len(self.dist_edges) - 1

    @property
    def n_speed_bins(self) -> int:
        return len(self.speed_edges) - 1

    def dist_centers(self) -> np.ndarray:
        e = np.asarray(self.dist_edges)
        return (e[:-1] + e[1:]) / 2

    def speed_centers(self) -> np.ndarray:
        e = np.asarray(self.speed_edges)
        return (e[:-1] + e[1:]) / 2

    def buildings(self) -> list[tuple[float, float, float, float]]:
        """Corner rectangles (xmin, xmax, ymin, ymax)."""
        near = self.box_half + self.building_margin
        far = self.road_len
        rects = []
        for sx in (1, -1):
            for sy in (1, -1):
                xs = sorted((sx * near, sx * far))
                ys = sorted((sy * near, sy * far))
                rects.append((xs[0], xs[1], ys[0], ys[1]))
        return rects


@dataclass(frozen=True)
class CarState:
    id: str
    x: float
    y: float
    heading: float
    v: float

    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])


def kinematics_step(car: CarState, action: str, cfg: DrivingConfig) -> CarState:
    """Unicycle step: move at the current speed and heading, then apply the
    action's speed or heading change.  Honk coasts."""
    x = car.x + car.v * math.cos(car.heading) * cfg.dt
    y = car.y + car.v * math.sin(car.heading) * cfg.dt
    v, heading = car.v, car.heading
    if action == "A":
        v = min(cfg.v_max, v + cfg.a_lin * cfg.dt)
    elif action == "B":
        v = max(0.0, v - cfg.a_lin * cfg.dt)
    elif action == "L":
        heading = wrap_angle(heading + cfg.omega * cfg.dt)
    elif action == "R":
        heading = wrap_angle(heading - cfg.omega * cfg.dt)
    elif action != "H":
        raise ValueError(f"unknown action {action!r}")
    return CarState(car.id, x, y, heading, v)


# --------------------------------------------------------------------------
# lanes and paths
# --------------------------------------------------------------------------

# inbound heading per arm (driving toward the origin) and outbound heading
_ARM_IN_HEADING = {"N": -math.pi / 2, "S": math.pi / 2, "E": math.pi, "W": 0.0}
_ARM_OUT_HEADING = {"N": math.pi / 2, "S": -math.pi / 2, "E": 0.0, "W": math.pi}


@dataclass(frozen=True)
class Lane:
    index: int
    arm: str
    inbound: bool
    heading: float

    def point(self, d: float, cfg: DrivingConfig) -> np.ndarray:
        """Centerline point at distance d from the intersection box edge."""
        off = cfg.lane_offset
        edge = cfg.box_half + d
        if self.arm == "N":
            return np.array([-off if self.inbound else off, edge])
        if self.arm == "S":
            return np.array([off if self.inbound else -off, -edge])
        if self.arm == "E":
            return np.array([edge, off if self.inbound else -off])
        return np.array([-edge, -off if self.inbound else off])


def lanes(cfg: DrivingConfig) -> tuple[Lane, ...]:
    out = []
    for i, arm in enumerate(ARMS):
        out.append(Lane(2 * i, arm, True, _ARM_IN_HEADING[arm]))
        out.append(Lane(2 * i + 1, arm, False, _ARM_OUT_HEADING[arm]))
    return tuple(out)


_LANES_CACHE: dict[tuple, tuple[Lane, ...]] = {}


def lanes_for(cfg: DrivingConfig) -> tuple[Lane, ...]:
    key = (cfg.lane_offset, cfg.box_half)
    if key not in _LANES_CACHE:
        _LANES_CACHE[key] = lanes(cfg)
    return _LANES_CACHE[key]


def locate_car(car: CarState, cfg: DrivingConfig) -> Optional[tuple[int, float]]:
    """(lane index, distance to the box edge) for a car outside the box.

    Cars inside the box are not assigned to lane slots.  The lane is the
    one whose travel heading best matches the car's and whose centerline
    is nearest.
    """
    if abs(car.x) <= cfg.box_half and abs(car.y) <= cfg.box_half:
        return None
    best = None
    for lane in lanes_for(cfg):
        if abs(wrap_angle(car.heading - lane.heading)) > math.pi / 4:
            continue
        if lane.arm in ("N", "S"):
            along = abs(car.y) - cfg.box_half
            on_arm = (car.y > 0) == (lane.arm == "N")
            lateral = abs(car.x - lane.point(0, cfg)[0])
        else:
            along = abs(car.x) - cfg.box_half
            on_arm = (car.x > 0) == (lane.arm == "E")
            lateral = abs(car.y - lane.point(0, cfg)[1])
        if not on_arm or along < 0:
            continue
        if lateral > cfg.lane_offset * 1.5:
            continue
        if best is None or lateral < best[2]:
            best = (lane.index, along, lateral)
    if best is None:
        return None
    return best[0], best[1]


def exit_arm(arm_in: str, goal: str) -> str:
    h_in = _ARM_IN_HEADING[arm_in]
    if goal == "forward":
        h_out = h_in
    elif goal == "right":
        h_out = wrap_angle(h_in - math.pi / 2)
    else:
        h_out = wrap_angle(h_in + math.pi / 2)
    for arm, h in _ARM_OUT_HEADING.items():
        if abs(wrap_angle(h - h_out)) < 1e-6:
            return arm
    raise AssertionError("no exit arm")


def waypoints(arm_in: str, goal: str, cfg: DrivingConfig) -> list[np.ndarray]:
    ls = {(ln.arm, ln.inbound): ln for ln in lanes_for(cfg)}
    entry = ls[(arm_in, True)].point(0.0, cfg)
    out_lane = ls[(exit_arm(arm_in, goal), False)]
    # the far waypoint sits beyond any reachable position so the heading
    # controller never overtakes it
    return [entry, out_lane.point(0.0, cfg), out_lane.point(cfg.road_len * 3.0, cfg)]


def _polyline(arm_in: str, goal: str, cfg: DrivingConfig) -> list[np.ndarray]:
    ls = {(ln.arm, ln.inbound): ln for ln in lanes_for(cfg)}
    approach = ls[(arm_in, True)].point(cfg.road_len * 3.0, cfg)
    return [approach, *waypoints(arm_in, goal, cfg)]


def _dist_to_segment(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    d = b - a
    dd = float(d @ d)
    t = 0.0 if dd == 0 else float(np.clip((p - a) @ d / dd, 0.0, 1.0))
    return float(np.linalg.norm(a + t * d - p))


def _segment_scores(car: CarState, pts: Sequence[np.ndarray]) -> list[float]:
    """Per-segment affinity: distance plus a heading-misalignment penalty,
    which keeps mid-turn cars attached to their own route."""
    scores = []
    for k in range(len(pts) - 1):
        d = _dist_to_segment(car.pos(), pts[k], pts[k + 1])
        seg_dir = math.atan2(pts[k + 1][1] - pts[k][1], pts[k + 1][0] - pts[k][0])
        scores.append(d + 2.0 * abs(wrap_angle(car.heading - seg_dir)))
    return scores


def _arm_of_entry(car: CarState, goal: str, cfg: DrivingConfig) -> str:
    """Approach arm: the located inbound lane, else the arm whose route
    polyline best matches the car's position and heading."""
    loc = locate_car(car, cfg)
    if loc is not None:
        lane = lanes_for(cfg)[loc[0]]
        if lane.inbound:
            return lane.arm
    best_arm, best_d = "S", float("inf")
    for arm in ARMS:
        d = min(_segment_scores(car, _polyline(arm, goal, cfg)))
        if d < best_d:
            best_arm, best_d = arm, d
    return best_arm


def move_action(car: CarState, goal: str, cfg: DrivingConfig, arm_in: Optional[str] = None) -> str:
    """Shortest-path action: head for the next route waypoint, braking
    ahead of turns and when over the segment's target speed.

    The active waypoint is the end vertex of the route segment nearest
    the car, so the controller stays stable mid-turn.
    """
    if arm_in is None:
        arm_in = _arm_of_entry(car, goal, cfg)
    pts = _polyline(arm_in, goal, cfg)
    pos = car.pos()
    scores = _segment_scores(car, pts)
    seg = 0
    best = float("inf")
    for k, sc in enumerate(scores):
        if sc <= best + 1e-9:
            best, seg = sc, k
    target = pts[seg + 1]
    turning = goal != "forward"
    if seg == 0:
        v_target = cfg.v_max
        if turning:
            dist_entry = float(np.linalg.norm(pts[1] - pos))
            brake_dist = (car.v**2 - cfg.v_turn**2) / (2 * cfg.a_lin) + 1.0
            if car.v > cfg.v_turn + 1e-9 and dist_entry < max(cfg.slow_zone, brake_dist):
                return "B"
    elif seg == 1:
        v_target = cfg.v_turn if turning else cfg.v_max
    else:
        v_target = cfg.v_max
    err = wrap_angle(math.atan2(target[1] - pos[1], target[0] - pos[0]) - car.heading)
    if abs(err) > cfg.heading_tol:
        return "L" if err > 0 else "R"
    if car.v > v_target + 1e-9:
        return "B"
    return "A"


def rollout_path(car: CarState, goal: str, cfg: DrivingConfig,
                 horizon: Optional[int] = None) -> np.ndarray:
    """(horizon + 1, 2) positions when the car follows its path alone."""
    h = cfg.horizon if horizon is None else horizon
    arm_in = _arm_of_entry(car, goal, cfg)
    out = np.empty((h + 1, 2))
    out[0] = car.pos()
    cur = car
    for i in range(1, h + 1):
        cur = kinematics_step(cur, move_action(cur, goal, cfg, arm_in), cfg)
        out[i] = (cur.x, cur.y)
    return out


def ballistic_path(car: CarState, cfg: DrivingConfig, horizon: Optional[int] = None) -> np.ndarray:
    h = cfg.horizon if horizon is None else horizon
    steps = np.arange(h + 1)[:, None]
    vel = np.array([math.cos(car.heading), math.sin(car.heading)]) * car.v * cfg.dt
    return car.pos()[None, :] + steps * vel


def paths_conflict(a: np.ndarray, b: np.ndarray, cfg: DrivingConfig) -> bool:
    d = np.linalg.norm(a[1:] - b[1:], axis=1)
    return bool((d < cfg.conflict_radius).any())


def _in_box(points: np.ndarray, cfg: DrivingConfig, margin: float = 2.0) -> np.ndarray:
    lim = cfg.box_half + margin
    return (np.abs(points[..., 0]) <= lim) & (np.abs(points[..., 1]) <= lim)


def paths_cross_in_box(a: np.ndarray, b: np.ndarray, cfg: DrivingConfig) -> bool:
    """Whether two paths pass through the same spot at the intersection.

    Danger signaling is about route claims, so this ignores timing (a
    yielding driver still owns its crossing) and only counts closeness
    inside the box; same-lane following outside the box is the follower's
    braking problem, not a signal.
    """
    d = np.linalg.norm(a[1:, None, :] - b[None, 1:, :], axis=-1)
    near = d < cfg.conflict_radius
    return bool((near & _in_box(a[1:], cfg)[:, None]).any())


def nominal_path(car: CarState, goal: str, cfg: DrivingConfig,
                 horizon: Optional[int] = None) -> np.ndarray:
    """Goal path rolled at cruise speed regardless of the current speed.

    A stopped or yielding car still intends this route; the danger
    predicate compares nominal routes, while move risk uses actual ones.
    """
    cruise = max(car.v, cfg.danger_nominal_speed)
    return rollout_path(replace(car, v=cruise), goal, cfg, horizon)


# --------------------------------------------------------------------------
# observation
# --------------------------------------------------------------------------


def _segments_hit_rect(p: np.ndarray, q: np.ndarray, rect) -> np.ndarray:
    """Vectorized segment-vs-axis-aligned-rectangle test (q may be (N, 2))."""
    xmin, xmax, ymin, ymax = rect
    q = np.atleast_2d(q)
    d = q - p
    t0 = np.zeros(len(q))
    t1 = np.ones(len(q))
    hit = np.ones(len(q), dtype=bool)
    for axis, lo, hi in ((0, xmin, xmax), (1, ymin, ymax)):
        pi, di = p[axis], d[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - pi) / di
            tb = (hi - pi) / di
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        parallel = di == 0
        inside = (pi >= lo) & (pi <= hi)
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    hit &= t0 <= t1
    return hit


def _segments_hit_disc(p: np.ndarray, q: np.ndarray, center: np.ndarray, r: float) -> np.ndarray:
    """True where the segment p->q passes within r of the center."""
    q = np.atleast_2d(q)
    d = q - p
    pc = center - p
    dd = (d * d).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.clip((d @ pc) / np.where(dd == 0, 1.0, dd), 0.0, 1.0)
    closest = p + t[:, None] * d
    return np.linalg.norm(closest - center, axis=1) < r


def points_visible(
    observer: CarState,
    points: np.ndarray,
    blockers: Sequence[CarState],
    cfg: DrivingConfig,
) -> np.ndarray:
    """Which points the observer can see: in field of view, in range, and
    with a clear sight line past the buildings and other cars' discs."""
    points = np.atleast_2d(points)
    p = observer.pos()
    delta = points - p
    dist = np.linalg.norm(delta, axis=1)
    ang = np.arctan2(delta[:, 1], delta[:, 0])
    angdiff = np.abs((ang - observer.heading + math.pi) % (2 * math.pi) - math.pi)
    ok = (dist <= cfg.fov_range) & (angdiff <= cfg.fov_half + 1e-12)
    for rect in cfg.buildings():
        ok &= ~_segments_hit_rect(p, points, rect)
    for blocker in blockers:
        ok &= ~_segments_hit_disc(p, points, blocker.pos(), cfg.car_radius)
    return ok


@dataclass(frozen=True)
class DrivingObservation:
    own: CarState
    visible: tuple[tuple[str, CarState], ...]
    honks: tuple[str, ...]
    attentive: bool = True


def observe(
    cars: Sequence[CarState],
    observer_id: str,
    cfg: DrivingConfig,
    honks: Sequence[str] = (),
    attentive: bool = True,
) -> DrivingObservation:
    """Partial observation: attentive drivers see unoccluded in-cone cars;
    inattentive drivers see nothing; everyone hears every honk."""
    me = next(c for c in cars if c.id == observer_id)
    visible: list[tuple[str, CarState]] = []
    if attentive:
        for c in cars:
            if c.id == observer_id:
                continue
            blockers = [b for b in cars if b.id not in (observer_id, c.id)]
            if bool(points_visible(me, c.pos()[None, :], blockers, cfg)[0]):
                visible.append((c.id, c))
    return DrivingObservation(me, tuple(visible), tuple(honks), attentive)


# --------------------------------------------------------------------------
# discretized level-0 state belief (per lane-slot hidden Markov filter)
# --------------------------------------------------------------------------


def slot_class(d: float, v: float, cfg: DrivingConfig) -> int:
    """Class index of an existing car: 1 + dist_bin * n_speed + speed_bin."""
    de = np.asarray(cfg.dist_edges)
    se = np.asarray(cfg.speed_edges)
    db = int(np.clip(np.searchsorted(de, d, side="right") - 1, 0, cfg.n_dist_bins - 1))
    sb = int(np.clip(np.searchsorted(se, v, side="right") - 1, 0, cfg.n_speed_bins - 1))
    return 1 + db * cfg.n_speed_bins + sb


def slot_prior(cfg: DrivingConfig) -> np.ndarray:
    p = np.empty(N_SLOT_CLASSES)
    p[0] = 1.0 - cfg.existence_prior
    p[1:] = cfg.existence_prior / (N_SLOT_CLASSES - 1)
    return p


def slot_transition_matrix(cfg: DrivingConfig) -> np.ndarray:
    """(13, 13) one-step transition for a slot's occupancy.

    Distance advances by the speed-bin center with the car's position
    uniform within its bin; mass leaving past the box edge exits the
    lane (becomes absent).  Speed drifts to adjacent bins.  Absent slots
    spawn a far-bin arrival at a small rate.
    """
    nd, nv = cfg.n_dist_bins, cfg.n_speed_bins
    de = np.asarray(cfg.dist_edges)
    T = np.zeros((N_SLOT_CLASSES, N_SLOT_CLASSES))
    T[0, 0] = 1.0 - cfg.arrival_rate
    for sb in range(nv):
        T[0, 1 + (nd - 1) * nv + sb] = cfg.arrival_rate / nv
    drift = (1.0 - cfg.speed_stay) / 2
    for db in range(nd):
        lo, hi = de[db], de[db + 1]
        for sb in range(nv):
            src = 1 + db * nv + sb
            shift = float(cfg.speed_centers()[sb]) * cfg.dt
            new_lo, new_hi = lo - shift, hi - shift
            width = hi - lo
            # distance-bin split by interval overlap
            d_mass = np.zeros(nd + 1)  # last entry: exited past the edge
            d_mass[nd] = max(0.0, min(new_hi, 0.0) - new_lo) / width
            for db2 in range(nd):
                a, b = de[db2], de[db2 + 1]
                d_mass[db2] = max(0.0, min(new_hi, b) - max(new_lo, a)) / width
            for sb2 in range(nv):
                if sb2 == sb:
                    sp = cfg.speed_stay
                elif abs(sb2 - sb) == 1:
                    sp = drift
                else:
                    continue
                for db2 in range(nd):
                    T[src, 1 + db2 * nv + sb2] += d_mass[db2] * sp
            T[src, 0] += d_mass[nd] * (cfg.speed_stay + 2 * drift)
    # edge speed bins lack one drift neighbor; renormalize rows
    rowsum = T.sum(axis=1, keepdims=True)
    T = T / np.where(rowsum == 0, 1.0, rowsum)
    return T


class SlotFilter:
    """Forward filter over all lane slots for one driver.

    beliefs: (8 lanes, 2 slots, 13) row-stochastic array.
    """

    def __init__(self, cfg: DrivingConfig):
        self.cfg = cfg
        self.beliefs = np.tile(slot_prior(cfg), (N_LANES, SLOTS_PER_LANE, 1))
        self._T = slot_transition_matrix(cfg)
        # rolling per-slot evidence window: (seen_empty, seen_car, d, v)
        self.windows = np.zeros((N_LANES, SLOTS_PER_LANE, 4, 4))

    def copy(self) -> "SlotFilter":
        out = SlotFilter.__new__(SlotFilter)
        out.cfg = self.cfg
        out.beliefs = self.beliefs.copy()
        out._T = self._T
        out.windows = self.windows.copy()
        return out

    def predict(self) -> None:
        self.beliefs = self.beliefs @ self._T

    def update(self, obs: DrivingObservation, all_cars_hint: Optional[Sequence[CarState]] = None
               ) -> None:
        """Condition on one observation.

        Visible lane cars pin their slot to the observed class.  Lane
        distance bins whose region the observer fully sees with no car
        there exclude occupancy in that bin.  Unseen regions keep the
        predicted mass.
        """
        cfg = self.cfg
        me = obs.own
        blockers = [c for _, c in obs.visible]
        # slot assignment of visible cars, nearest first
        assigned: dict[tuple[int, int], int] = {}
        per_lane: dict[int, list[tuple[float, CarState]]] = {}
        for _, car in obs.visible:
            loc = locate_car(car, cfg)
            if loc is None:
                continue
            per_lane.setdefault(loc[0], []).append((loc[1], car))
        for lane_idx, entries in per_lane.items():
            entries.sort(key=lambda e: e[0])
            for slot, (d, car) in enumerate(entries[:SLOTS_PER_LANE]):
                assigned[(lane_idx, slot)] = slot_class(d, car.v, cfg)

        if obs.attentive:
            probe_vis = self._bin_regions_visible(me, blockers)
        else:
            probe_vis = np.zeros((N_LANES, cfg.n_dist_bins), dtype=bool)

        nv = cfg.n_speed_bins
        self.windows = np.roll(self.windows, 1, axis=2)
        self.windows[:, :, 0, :] = 0.0
        for lane_idx in range(N_LANES):
            for slot in range(SLOTS_PER_LANE):
                b = self.beliefs[lane_idx, slot]
                if (lane_idx, slot) in assigned:
                    b = np.zeros(N_SLOT_CLASSES)
                    b[assigned[(lane_idx, slot)]] = 1.0
                    cls = assigned[(lane_idx, slot)] - 1
                    self.windows[lane_idx, slot, 0] = [
                        0.0,
                        1.0,
                        (cls // nv + 0.5) / cfg.n_dist_bins,
                        (cls % nv + 0.5) / nv,
                    ]
                else:
                    lik = np.ones(N_SLOT_CLASSES)
                    any_seen = False
                    for db in range(cfg.n_dist_bins):
                        if probe_vis[lane_idx, db]:
                            lik[1 + db * nv : 1 + (db + 1) * nv] = 0.0
                            any_seen = True
                    if any_seen:
                        self.windows[lane_idx, slot, 0, 0] = 1.0
                    b = b * lik
                    tot = b.sum()
                    b = slot_prior(cfg) if tot <= 0 else b / tot
                self.beliefs[lane_idx, slot] = b

    def _bin_regions_visible(self, me: CarState, blockers: Sequence[CarState]) -> np.ndarray:
        cfg = self.cfg
        probes = []
        for lane in lanes_for(cfg):
            de = cfg.dist_edges
            for db in range(cfg.n_dist_bins):
                lo, hi = de[db], de[db + 1]
                for frac in (0.1, 0.5, 0.9):
                    probes.append(lane.point(lo + frac * (hi - lo), cfg))
        vis = points_visible(me, np.array(probes), blockers, cfg)
        vis = vis.reshape(N_LANES, cfg.n_dist_bins, 3)
        return vis.all(axis=2)

    def step(self, obs: DrivingObservation) -> None:
        self.predict()
        self.update(obs)

    def hypothesis_cars(
        self,
        min_mass: float = 1e-3,
        skip: Sequence[tuple[int, int]] = (),
    ) -> list[tuple[float, int, int, int]]:
        """(mass, lane, dist_bin, speed_bin) for occupied-slot hypotheses.

        Slots in `skip` (already accounted for by an explicitly tracked
        car) are omitted so their risk is not double counted.
        """
        cfg = self.cfg
        skip_set = set(skip)
        out = []
        nv = cfg.n_speed_bins
        for lane_idx in range(N_LANES):
            for slot in range(SLOTS_PER_LANE):
                if (lane_idx, slot) in skip_set:
                    continue
                b = self.beliefs[lane_idx, slot]
                for db in range(cfg.n_dist_bins):
                    for sb in range(nv):
                        m = float(b[1 + db * nv + sb])
                        if m >= min_mass:
                            out.append((m, lane_idx, db, sb))
        return out

    def awareness_of(self, car: CarState) -> float:
        """Believed probability of a car being where it actually is,
        marginalized over speed (absent and wrong-bin mass count against)."""
        cfg = self.cfg
        loc = locate_car(car, cfg)
        if loc is None:
            return 0.0
        lane_idx, d = loc
        de = np.asarray(cfg.dist_edges)
        db = int(np.clip(np.searchsorted(de, d, side="right") - 1, 0, cfg.n_dist_bins - 1))
        nv = cfg.n_speed_bins
        mass = 0.0
        for slot in range(SLOTS_PER_LANE):
            mass += float(self.beliefs[lane_idx, slot, 1 + db * nv : 1 + (db + 1) * nv].sum())
        return min(1.0, mass)

    def digest(self) -> list[list[float]]:
        """Compact per-slot summary [p_exists, E[dist], E[speed]]."""
        cfg = self.cfg
        dc, sc = cfg.dist_centers(), cfg.speed_centers()
        out = []
        for lane_idx in range(N_LANES):
            for slot in range(SLOTS_PER_LANE):
                b = self.beliefs[lane_idx, slot]
                pe = float(1.0 - b[0])
                grid = b[1:].reshape(cfg.n_dist_bins, cfg.n_speed_bins)
                if pe > 1e-12:
                    ed = float((grid.sum(axis=1) @ dc) / pe)
                    ev = float((grid.sum(axis=0) @ sc) / pe)
                else:
                    ed = ev = 0.0
                out.append([round(pe, 4), round(ed, 3), round(ev, 3)])
        return out


def hypothesis_path(lane_idx: int, db: int, sb: int, cfg: DrivingConfig,
                    horizon: Optional[int] = None) -> np.ndarray:
    """Straight constant-speed path of a hypothesized slot car."""
    h = cfg.horizon if horizon is None else horizon
    lane = lanes_for(cfg)[lane_idx]
    d0 = float(cfg.dist_centers()[db])
    v = float(cfg.speed_centers()[sb])
    sign = -1.0 if lane.inbound else 1.0
    ds = d0 + sign * v * cfg.dt * np.arange(h + 1)
    return np.array([lane.point(float(max(d, -cfg.box_half * 2)), cfg) for d in ds])


# --------------------------------------------------------------------------
# hierarchical planner
# --------------------------------------------------------------------------


def _combine_risk(terms: Sequence[float]) -> float:
    """Probabilistic OR of independent conflict probabilities."""
    safe = 1.0
    for p in terms:
        safe *= 1.0 - min(1.0, max(0.0, p))
    return 1.0 - safe


@dataclass
class PlanInputs:
    """Everything the mode scorer needs for one (car, step, goal) query.

    own_path: planned positions under the goal being scored.
    car_conflicts: per tracked car, probability its motion crosses own_path.
    hypothesis_risk: conflict mass from believed-but-unseen slot cars.
    danger: probability some seen driver is about to cross a car it is
        unaware of (level-1 only; 0 disables signaling).
    """

    own_move_action: str
    car_conflicts: list[float]
    hypothesis_risk: float
    danger: float = 0.0


def plan_scores(inp: PlanInputs, cfg: DrivingConfig) -> tuple[np.ndarray, list[str]]:
    risk = _combine_risk(inp.car_conflicts + [inp.hypothesis_risk])
    scores = [cfg.progress_reward - cfg.risk_weight * risk, -cfg.stop_penalty]
    modes = ["move", "stop"]
    if inp.danger >= cfg.signal_threshold:
        scores.append(cfg.signal_score)
        modes.append("signal")
    return np.asarray(scores), modes


def plan_action_probs(inp: PlanInputs, cfg: DrivingConfig) -> np.ndarray:
    """Action distribution of the hierarchical planner.

    The high level picks move, stop, or signal by Boltzmann over the mode
    scores; the low level maps move to the shortest-path action, stop to
    brake, signal to honk.  A uniform floor keeps every action likelihood
    positive."""
    scores, modes = plan_scores(inp, cfg)
    scaled = cfg.beta * (scores - scores.max())
    soft = np.exp(scaled)
    soft /= soft.sum()
    probs = np.zeros(len(ACTIONS))
    for mode, p in zip(modes, soft):
        if mode == "move":
            probs[ACTIONS.index(inp.own_move_action)] += p
        elif mode == "stop":
            probs[ACTIONS.index("B")] += p
        else:
            probs[ACTIONS.index("H")] += p
    probs = (1.0 - cfg.floor * len(ACTIONS)) * probs + cfg.floor
    return probs / probs.sum()


def hierarchical_plan(
    car: CarState,
    goal: str,
    cfg: DrivingConfig,
    tracked: Sequence[tuple[np.ndarray, np.ndarray]] = (),
    slot_filter: Optional[SlotFilter] = None,
    skip_slots: Sequence[tuple[int, int]] = (),
    danger: float = 0.0,
) -> np.ndarray:
    """Action probabilities for one car given its beliefs.

    tracked: per visible car, (per-goal probabilities or a 1-vector, paths
    stacked (n_hyp, H+1, 2)); slot_filter supplies hypothesized unseen
    cars except for the slots in skip_slots (already tracked explicitly).
    """
    own = rollout_path(car, goal, cfg)
    conflicts = []
    for weights, paths in tracked:
        p = 0.0
        for w, path in zip(weights, paths):
            if w > 0 and paths_conflict(own, path, cfg):
                p += float(w)
        conflicts.append(p)
    hyp_risk = 0.0
    if slot_filter is not None:
        terms = []
        for mass, lane_idx, db, sb in slot_filter.hypothesis_cars(skip=skip_slots):
            hp = hypothesis_path(lane_idx, db, sb, cfg)
            if paths_conflict(own, hp, cfg):
                terms.append(mass)
        hyp_risk = _combine_risk(terms)
    inp = PlanInputs(
        own_move_action=move_action(car, goal, cfg),
        car_conflicts=conflicts,
        hypothesis_risk=hyp_risk,
        danger=danger,
    )
    return plan_action_probs(inp, cfg)


def assigned_slots(visible_cars: Sequence[CarState], cfg: DrivingConfig
                   ) -> list[tuple[int, int]]:
    """(lane, slot) pairs occupied by explicitly tracked cars."""
    per_lane: dict[int, list[tuple[float, CarState]]] = {}
    for car in visible_cars:
        loc = locate_car(car, cfg)
        if loc is None:
            continue
        per_lane.setdefault(loc[0], []).append((loc[1], car))
    out = []
    for lane_idx, entries in per_lane.items():
        entries.sort(key=lambda e: e[0])
        for slot in range(min(len(entries), SLOTS_PER_LANE)):
            out.append((lane_idx, slot))
    return out


# --------------------------------------------------------------------------
# state payloads
# --------------------------------------------------------------------------


def encode_lane_slots(cars: Sequence[CarState], cfg: DrivingConfig) -> list[list[list[float]]]:
    """(8 lanes, 2 slots) of [exists, x, y, heading, speed]; empty slots are
    all-zero with exists = 0.  At most the two cars nearest the
    intersection are kept per lane."""
    table = [[[0.0, 0.0, 0.0, 0.0, 0.0] for _ in range(SLOTS_PER_LANE)] for _ in range(N_LANES)]
    per_lane: dict[int, list[tuple[float, CarState]]] = {}
    for car in cars:
        loc = locate_car(car, cfg)
        if loc is None:
            continue
        per_lane.setdefault(loc[0], []).append((loc[1], car))
    for lane_idx, entries in per_lane.items():
        entries.sort(key=lambda e: e[0])
        for slot, (_, car) in enumerate(entries[:SLOTS_PER_LANE]):
            table[lane_idx][slot] = [
                1.0,
                round(car.x, 6),
                round(car.y, 6),
                round(car.heading, 6),
                round(car.v, 6),
            ]
    return table


def decode_lane_slots(table: Sequence[Sequence[Sequence[float]]]) -> list[CarState]:
    out = []
    k = 0
    for lane_row in table:
        for slot in lane_row:
            if slot[0] >= 0.5:
                out.append(CarState(f"slot{k}", slot[1], slot[2], slot[3], slot[4]))
                k += 1
    return out


def car_payload(car: CarState) -> dict:
    return {
        "id": car.id,
        "x": round(car.x, 6),
        "y": round(car.y, 6),
        "heading": round(car.heading, 6),
        "v": round(car.v, 6),
    }


def car_from_payload(p: dict) -> CarState:
    return CarState(p["id"], float(p["x"]), float(p["y"]), float(p["heading"]), float(p["v"]))


def state_payload_driving(cars: Sequence[CarState], cfg: DrivingConfig) -> dict:
    return {
        "cars": [car_payload(c) for c in cars],
        "lanes": encode_lane_slots(cars, cfg),
    }


def obs_payload(obs: DrivingObservation) -> dict:
    return {
        "own": car_payload(obs.own),
        "visible": [[cid, car_payload(c)] for cid, c in obs.visible],
        "honks": list(obs.honks),
        "attentive": obs.attentive,
    }


# --------------------------------------------------------------------------
# cached hypothesis paths and fast risk assembly
# --------------------------------------------------------------------------

_HYP_PATHS: dict[tuple, np.ndarray] = {}


def hyp_paths_tensor(cfg: DrivingConfig) -> np.ndarray:
    """(8, n_dist, n_speed, H+1, 2) straight paths of hypothesized cars."""
    key = (cfg.lane_offset, cfg.box_half, cfg.dist_edges, cfg.speed_edges,
           cfg.horizon, cfg.dt)
    if key not in _HYP_PATHS:
        out = np.empty((N_LANES, cfg.n_dist_bins, cfg.n_speed_bins, cfg.horizon + 1, 2))
        for lane_idx in range(N_LANES):
            for db in range(cfg.n_dist_bins):
                for sb in range(cfg.n_speed_bins):
                    out[lane_idx, db, sb] = hypothesis_path(lane_idx, db, sb, cfg)
        _HYP_PATHS[key] = out
    return _HYP_PATHS[key]


def slot_hypothesis_risk(
    own_path: np.ndarray,
    slot_filter: SlotFilter,
    cfg: DrivingConfig,
    skip_slots: Sequence[tuple[int, int]] = (),
) -> float:
    """Conflict probability against believed-but-unseen slot occupancy."""
    hp = hyp_paths_tensor(cfg)  # (8, nd, nv, H+1, 2)
    d = np.linalg.norm(hp[..., 1:, :] - own_path[1:, :], axis=-1)
    conflict = (d < cfg.conflict_radius).any(axis=-1)  # (8, nd, nv)
    beliefs = slot_filter.beliefs[:, :, 1:].reshape(
        N_LANES, SLOTS_PER_LANE, cfg.n_dist_bins, cfg.n_speed_bins
    )
    mask = np.ones((N_LANES, SLOTS_PER_LANE, 1, 1))
    for lane_idx, slot in skip_slots:
        mask[lane_idx, slot] = 0.0
    terms = cfg.phantom_risk_scale * beliefs * mask * conflict[:, None, :, :]
    return float(1.0 - np.prod(1.0 - np.clip(terms, 0.0, 1.0)))


def _bin_observer_poses(cfg: DrivingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Positions and headings of hypothetical drivers at every lane bin center."""
    centers = cfg.dist_centers()
    pos = np.empty((N_LANES, cfg.n_dist_bins, 2))
    head = np.empty((N_LANES, cfg.n_dist_bins))
    for lane in lanes_for(cfg):
        for db, c in enumerate(centers):
            pos[lane.index, db] = lane.point(float(c), cfg)
            head[lane.index, db] = lane.heading
    return pos.reshape(-1, 2), head.reshape(-1)


def visible_from_poses(
    poses: np.ndarray,
    headings: np.ndarray,
    target: np.ndarray,
    blockers: Sequence[CarState],
    cfg: DrivingConfig,
) -> np.ndarray:
    """Whether a driver at each pose could see the target point."""
    delta = target[None, :] - poses
    dist = np.linalg.norm(delta, axis=1)
    ang = np.arctan2(delta[:, 1], delta[:, 0])
    angdiff = np.abs((ang - headings + math.pi) % (2 * math.pi) - math.pi)
    ok = (dist <= cfg.fov_range) & (angdiff <= cfg.fov_half + 1e-12)
    for rect in cfg.buildings():
        hit = np.array(
            [bool(_segments_hit_rect(p, target[None, :], rect)[0]) for p in poses]
        )
        ok &= ~hit
    for blocker in blockers:
        hit = np.array(
            [bool(_segments_hit_disc(p, target[None, :], blocker.pos(), cfg.car_radius)[0])
             for p in poses]
        )
        ok &= ~hit
    return ok


def slot_hypothesis_danger(
    own_path: np.ndarray,
    me: CarState,
    slot_filter: SlotFilter,
    blockers: Sequence[CarState],
    cfg: DrivingConfig,
    skip_slots: Sequence[tuple[int, int]] = (),
) -> float:
    """Probability a believed-but-unseen car is on a conflicting path and
    its driver could not see this car (the signal-danger trigger for
    traffic known only through the slot belief)."""
    hp = hyp_paths_tensor(cfg)
    d = np.linalg.norm(hp[..., 1:, None, :] - own_path[None, None, None, None, 1:, :], axis=-1)
    near = (d < cfg.conflict_radius) & _in_box(own_path[1:, :], cfg)[None, None, None, None, :]
    conflict = near.any(axis=(-1, -2))  # (8, nd, nv)
    poses, headings = _bin_observer_poses(cfg)
    sees_me = visible_from_poses(poses, headings, me.pos(), blockers, cfg)
    unaware = (~sees_me).reshape(N_LANES, cfg.n_dist_bins)
    beliefs = slot_filter.beliefs[:, :, 1:].reshape(
        N_LANES, SLOTS_PER_LANE, cfg.n_dist_bins, cfg.n_speed_bins
    )
    mask = np.ones((N_LANES, SLOTS_PER_LANE, 1, 1))
    for lane_idx, slot in skip_slots:
        mask[lane_idx, slot] = 0.0
    terms = (
        beliefs
        * mask
        * conflict[:, None, :, :]
        * unaware[:, None, :, None]
    )
    return float(1.0 - np.prod(1.0 - np.clip(terms, 0.0, 1.0)))


# --------------------------------------------------------------------------
# featurization
# --------------------------------------------------------------------------

FEATURE_WINDOW = 4


def heading_bucket(heading: float) -> int:
    """Nearest cardinal direction: 0=E, 1=N, 2=W, 3=S."""
    return int(round(wrap_angle(heading) / (math.pi / 2))) % 4


def pose_features(car: CarState, cfg: DrivingConfig) -> np.ndarray:
    out = np.zeros(14)
    loc = locate_car(car, cfg)
    if loc is not None:
        out[loc[0]] = 1.0
        out[8] = min(loc[1], cfg.road_len) / cfg.road_len
    out[9] = car.v / cfg.v_max
    out[10 + heading_bucket(car.heading)] = 1.0
    return out


def driving_feature_length(cfg: DrivingConfig) -> int:
    return 14 + FEATURE_WINDOW * 20 + 1


def featurize_driving(
    car_states: Sequence[CarState],
    car_actions: Sequence[Optional[str]],
    honk_flags: Sequence[bool],
    t: int,
    cfg: DrivingConfig,
) -> np.ndarray:
    """Target-centric prefix encoding for the goal and action networks.

    Current lane-slot pose (lane one-hot, normalized distance, speed,
    heading bucket) plus, for each of the last few steps, the same pose
    block, the action one-hot, and a honk-heard flag.  Zero padding covers
    early steps; empty slots stay all-zero.
    """
    idx = min(t, len(car_states) - 1)
    parts = [pose_features(car_states[idx], cfg)]
    window = np.zeros(FEATURE_WINDOW * 20)
    for slot, s in enumerate(range(t - 1, max(-1, t - 1 - FEATURE_WINDOW), -1)):
        if s < 0:
            break
        seg = np.zeros(20)
        seg[:14] = pose_features(car_states[s], cfg)
        if car_actions[s] is not None:
            seg[14 + ACTIONS.index(car_actions[s])] = 1.0
        seg[19] = 1.0 if honk_flags[s] else 0.0
        window[slot * 20 : (slot + 1) * 20] = seg
    parts.append(window)
    parts.append(np.array([min(t, cfg.t_max) / cfg.t_max]))
    return np.concatenate(parts)


def slot_feature_length() -> int:
    return FEATURE_WINDOW * 4 + N_LANES + 1


def slot_features(window: np.ndarray, lane_idx: int, slot: int) -> np.ndarray:
    """Per-slot evidence window plus lane and slot identity."""
    lane_onehot = np.zeros(N_LANES)
    lane_onehot[lane_idx] = 1.0
    return np.concatenate([window.reshape(-1), lane_onehot, [float(slot)]])


class AmortizedSlotFilter(SlotFilter):
    """Slot filter whose occluded-slot posteriors are rebuilt each step from
    proposal samples reweighted by the exact filter mass.

    Samples `n0` classes per occluded slot from the recognition network's
    proposal; each draw's weight is the filter's predicted-and-conditioned
    mass divided by the draw density, so the sparse posterior targets the
    same distribution the exact filter computes.
    """

    def __init__(self, cfg: DrivingConfig, params, n0: int, rng: np.random.Generator,
                 floor: float = DEFAULT_FLOOR):
        super().__init__(cfg)
        self._params = params
        self._n0 = n0
        self._rng = rng
        self._floor = floor

    def update(self, obs: DrivingObservation, all_cars_hint=None) -> None:
        from .proposals import propose

        prev = self.beliefs.copy()
        super().update(obs)
        if self._params is None:
            return
        exact = self.beliefs
        for lane_idx in range(N_LANES):
            for slot in range(SLOTS_PER_LANE):
                b = exact[lane_idx, slot]
                if b.max() >= 1.0 - 1e-12:
                    continue  # pinned by a visible car
                feats = slot_features(self.windows[lane_idx, slot], lane_idx, slot)
                q = propose(self._params, feats, prev[lane_idx, slot], floor=self._floor)
                n = min(self._n0, N_SLOT_CLASSES)
                cum = np.cumsum(q)
                cum[-1] = 1.0
                idx = np.searchsorted(cum, self._rng.uniform(size=n), side="right")
                idx = np.minimum(idx, N_SLOT_CLASSES - 1)
                w = np.zeros(N_SLOT_CLASSES)
                np.add.at(w, idx, b[idx] / q[idx])
                tot = w.sum()
                self.beliefs[lane_idx, slot] = b if tot <= 0 else w / tot


# --------------------------------------------------------------------------
# simulated drivers
# --------------------------------------------------------------------------


class _StepCache:
    """Rollout cache shared by all drivers in one simulation; keyed by the
    full pose so stale states from earlier steps never collide."""

    def __init__(self, cfg: DrivingConfig):
        self.cfg = cfg
        self.rollouts: dict[tuple, np.ndarray] = {}
        self.ballistics: dict[tuple, np.ndarray] = {}

    @staticmethod
    def _pose(car: CarState) -> tuple:
        return (car.id, car.x, car.y, car.heading, car.v)

    def rollout(self, car: CarState, goal_idx: int) -> np.ndarray:
        key = (*self._pose(car), goal_idx)
        if key not in self.rollouts:
            self.rollouts[key] = rollout_path(car, GOALS[goal_idx], self.cfg)
        return self.rollouts[key]

    def ballistic(self, car: CarState) -> np.ndarray:
        key = self._pose(car)
        if key not in self.ballistics:
            self.ballistics[key] = ballistic_path(car, self.cfg)
        return self.ballistics[key]


def _level0_action_probs(
    car: CarState,
    goal_idx: int,
    visible: Sequence[CarState],
    slot_filter: SlotFilter,
    cfg: DrivingConfig,
    cache: _StepCache,
) -> np.ndarray:
    """Level-0 policy: plan against ballistic projections of seen cars and
    the slot belief for everything unseen; never signals."""
    own = cache.rollout(car, goal_idx)
    conflicts = [
        1.0 if paths_conflict(own, cache.ballistic(c), cfg) else 0.0 for c in visible
    ]
    hyp = slot_hypothesis_risk(own, slot_filter, cfg, assigned_slots(visible, cfg))
    inp = PlanInputs(
        own_move_action=move_action(car, GOALS[goal_idx], cfg),
        car_conflicts=conflicts,
        hypothesis_risk=hyp,
        danger=0.0,
    )
    return plan_action_probs(inp, cfg)


def _level1_action_probs(
    car: CarState,
    goal_idx: int,
    visible: Sequence[CarState],
    goal_beliefs: dict[str, np.ndarray],
    other_filters: dict[str, SlotFilter],
    own_filter: SlotFilter,
    cfg: DrivingConfig,
    cache: _StepCache,
) -> np.ndarray:
    """Level-1 policy: plan against goal-weighted planned paths of seen
    cars, signal when a seen driver seems unaware of a conflicting car."""
    own = cache.rollout(car, goal_idx)
    conflicts = []
    for other in visible:
        b = goal_beliefs.get(other.id, np.full(len(GOALS), 1 / len(GOALS)))
        p = 0.0
        for g, w in enumerate(b):
            if w > 0 and paths_conflict(own, cache.rollout(other, g), cfg):
                p += float(w)
        conflicts.append(p)
    skip = assigned_slots(visible, cfg)
    hyp = slot_hypothesis_risk(own, own_filter, cfg, skip)
    own_nominal = nominal_path(car, GOALS[goal_idx], cfg)
    slot_danger = slot_hypothesis_danger(own_nominal, car, own_filter, visible, cfg, skip)

    danger_terms = [slot_danger]
    everyone = {c.id: c for c in visible}
    everyone[car.id] = car
    for other in visible:
        sim = other_filters.get(other.id)
        if sim is None:
            continue
        b_other = goal_beliefs.get(other.id, np.full(len(GOALS), 1 / len(GOALS)))
        for k_id, k_car in everyone.items():
            if k_id == other.id:
                continue
            aware = sim.awareness_of(k_car)
            if aware >= cfg.p_aware:
                continue
            if k_id == car.id:
                k_paths = [(1.0, own_nominal)]
            else:
                bk = goal_beliefs.get(k_id, np.full(len(GOALS), 1 / len(GOALS)))
                k_paths = [
                    (float(w), nominal_path(k_car, GOALS[g], cfg))
                    for g, w in enumerate(bk)
                    if w > 0
                ]
            p_conf = 0.0
            for g, w in enumerate(b_other):
                if w <= 0:
                    continue
                path_o = nominal_path(other, GOALS[g], cfg)
                for wk, pk in k_paths:
                    if paths_cross_in_box(path_o, pk, cfg):
                        p_conf += float(w) * wk
            danger_terms.append(min(1.0, p_conf))
    danger = _combine_risk(danger_terms)
    inp = PlanInputs(
        own_move_action=move_action(car, GOALS[goal_idx], cfg),
        car_conflicts=conflicts,
        hypothesis_risk=hyp,
        danger=danger,
    )
    return plan_action_probs(inp, cfg)


class SimDriver:
    """Online belief and policy state of one simulated driver."""

    def __init__(
        self,
        car_id: str,
        goal_idx: int,
        level: int,
        cfg: DrivingConfig,
        rng: np.random.Generator,
        attentive: bool = True,
        q0_params=None,
        n0: int = 5,
        q1_params=None,
        n1: int = 3,
    ):
        self.id = car_id
        self.goal_idx = goal_idx
        self.level = level
        self.cfg = cfg
        self.rng = rng
        self.base_attentive = attentive
        self.attention_timer = 0
        if q0_params is not None:
            self.filter: SlotFilter = AmortizedSlotFilter(cfg, q0_params, n0, rng)
        else:
            self.filter = SlotFilter(cfg)
        self.q1_params = q1_params
        self.n1 = n1
        self.other_filters: dict[str, SlotFilter] = {}
        self.goal_loglik: dict[str, np.ndarray] = {}
        self._prev_view: dict[str, CarState] = {}
        self._prev_obs_of: dict[str, DrivingObservation] = {}

    def effective_attentive(self) -> bool:
        return self.base_attentive or self.attention_timer > 0

    def hear_honk(self) -> None:
        self.attention_timer = self.cfg.attention_steps

    def goal_belief(self, other_id: str) -> np.ndarray:
        ll = self.goal_loglik.get(other_id)
        if ll is None:
            return np.full(len(GOALS), 1.0 / len(GOALS))
        w = np.exp(ll - ll.max())
        return w / w.sum()

    def act(
        self,
        cars: Sequence[CarState],
        honks_prev: Sequence[str],
        actions_prev: Optional[dict[str, str]],
        cache: _StepCache,
    ) -> str:
        cfg = self.cfg
        if self.attention_timer > 0:
            self.attention_timer -= 1
        obs = observe(cars, self.id, cfg, honks_prev, self.effective_attentive())
        me = obs.own
        visible_cars = [c for _, c in obs.visible]

        if self.level >= 1:
            # credit last step's observed actions against each goal hypothesis
            if actions_prev is not None:
                for j_id, j_prev in self._prev_view.items():
                    a_j = actions_prev.get(j_id)
                    prev_obs_j = self._prev_obs_of.get(j_id)
                    sim = self.other_filters.get(j_id)
                    if a_j is None or prev_obs_j is None or sim is None:
                        continue
                    ll = self.goal_loglik.setdefault(j_id, np.zeros(len(GOALS)))
                    vis_j = [c for _, c in prev_obs_j.visible]
                    for g in range(len(GOALS)):
                        probs = _level0_action_probs(j_prev, g, vis_j, sim, cfg, cache)
                        ll[g] += float(np.log(probs[ACTIONS.index(a_j)]))
            # advance the simulated belief of every driver I can see
            view_world = visible_cars + [me]
            new_prev_obs: dict[str, DrivingObservation] = {}
            for j in visible_cars:
                sim = self.other_filters.setdefault(j.id, SlotFilter(cfg))
                obs_j = observe(view_world, j.id, cfg, honks_prev, True)
                sim.step(obs_j)
                new_prev_obs[j.id] = obs_j
            for j_id, sim in self.other_filters.items():
                if j_id not in {c.id for c in visible_cars}:
                    sim.predict()
            self._prev_obs_of = new_prev_obs
            self._prev_view = {c.id: c for c in visible_cars}

        self.filter.step(obs)

        if self.level == 0:
            probs = _level0_action_probs(me, self.goal_idx, visible_cars, self.filter, cfg, cache)
        else:
            beliefs = {c.id: self.goal_belief(c.id) for c in visible_cars}
            probs = _level1_action_probs(
                me, self.goal_idx, visible_cars, beliefs, self.other_filters,
                self.filter, cfg, cache,
            )
        return ACTIONS[int(self.rng.choice(len(ACTIONS), p=probs))]


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------

DRIVING_KINDS = ("s0", "s1", "s2", "test", "gen4car", "geninattentive")


def _spawn_cars(cfg: DrivingConfig, rng: np.random.Generator, n_cars: int) -> list[CarState]:
    arms = list(ARMS)
    rng.shuffle(arms)
    lane_by_arm = {ln.arm: ln for ln in lanes_for(cfg) if ln.inbound}
    cars = []
    for k in range(n_cars):
        lane = lane_by_arm[arms[k % 4]]
        d = float(rng.uniform(10.0, 30.0))
        v = float(rng.uniform(1.0, 4.0))
        pos = lane.point(d, cfg)
        cars.append(CarState(f"car{k}", float(pos[0]), float(pos[1]), lane.heading, v))
    return cars


def _collisions(cars: Sequence[CarState], cfg: DrivingConfig) -> int:
    n = 0
    for a, b in itertools.combinations(cars, 2):
        if float(np.linalg.norm(a.pos() - b.pos())) < 2 * cfg.collision_radius:
            n += 1
    return n


def _past_intersection(car: CarState, cfg: DrivingConfig) -> bool:
    """Well beyond the box and moving away from it."""
    r = max(abs(car.x), abs(car.y))
    if r <= cfg.box_half + 12:
        return False
    heading = np.array([math.cos(car.heading), math.sin(car.heading)])
    return float(car.pos() @ heading) > 0


def synthesize_driving_episodes(
    cfg: DrivingConfig,
    kind: str,
    count: int,
    seed: int,
    q0_params=None,
    q1_params=None,
    n0: int = 5,
    n1: int = 3,
) -> tuple[list[Episode], dict]:
    """Simulate intersection episodes; returns (episodes, summary).

    s0: level-0 drivers, exact state filters (trains the state network).
    s1: level-0 drivers, amortized state filters (needs q0).
    s2 / test: level-1 drivers with amortized lower-level inference
        (needs q0 and q1).
    gen4car: like test with four cars; geninattentive: like test with one
    driver who sees nothing until someone honks.
    Episodes stop once every car is well past the intersection or at
    t_max.  Collisions are recorded, not fatal.
    """
    if kind not in DRIVING_KINDS:
        raise ValueError(f"unknown driving kind {kind!r}")
    if kind == "s1" and q0_params is None:
        raise MissingModel("s1 synthesis needs a trained state recognition checkpoint")
    if kind in ("s2", "test", "gen4car", "geninattentive") and (
        q0_params is None or q1_params is None
    ):
        raise MissingModel(f"{kind} synthesis needs trained q0 and q1 checkpoints")

    level = 0 if kind in ("s0", "s1") else 1
    n_cars = 4 if kind == "gen4car" else 3
    episodes = []
    total_collisions = 0
    for i in range(count):
        ep_seed = int(make_rng("driving", kind, seed, i).integers(0, 2**31 - 1))
        rng = make_rng("driving-episode", ep_seed)
        cars = _spawn_cars(cfg, rng, n_cars)
        goals = [int(rng.integers(0, len(GOALS))) for _ in cars]
        attentive = [True] * n_cars
        if kind == "geninattentive":
            attentive[int(rng.integers(0, n_cars))] = False
        drivers = [
            SimDriver(
                car.id,
                goals[k],
                level,
                cfg,
                make_rng("driver", ep_seed, car.id),
                attentive=attentive[k],
                q0_params=q0_params if kind != "s0" else None,
                n0=n0,
                q1_params=q1_params,
                n1=n1,
            )
            for k, car in enumerate(cars)
        ]
        steps: list[EpisodeStep] = []
        honks_prev: list[str] = []
        actions_prev: Optional[dict[str, str]] = None
        collisions = 0
        for _t in range(cfg.t_max):
            cache = _StepCache(cfg)
            actions = {}
            obs_payloads = {}
            for drv in drivers:
                if honks_prev and not drv.base_attentive:
                    drv.hear_honk()
                actions[drv.id] = drv.act(cars, honks_prev, actions_prev, cache)
            for drv, car in zip(drivers, cars):
                o = observe(cars, drv.id, cfg, honks_prev, drv.effective_attentive())
                payload = obs_payload(o)
                if kind == "s0":
                    payload["belief"] = drv.filter.digest()
                obs_payloads[drv.id] = payload
            steps.append(
                EpisodeStep(state_payload_driving(cars, cfg), dict(actions), obs_payloads)
            )
            honks_prev = [cid for cid, a in actions.items() if a == "H"]
            cars = [kinematics_step(c, actions[c.id], cfg) for c in cars]
            collisions += _collisions(cars, cfg)
            actions_prev = actions
            done = all(_past_intersection(c, cfg) for c in cars)
            if done:
                break
        total_collisions += collisions
        agents = tuple(
            AgentRole(c, level, goals[k], attentive[k])
            for k, c in enumerate(d.id for d in drivers)
        )
        episodes.append(
            Episode(env="driving", seed=ep_seed, kind=kind, agents=agents, steps=tuple(steps))
        )
    summary = {"episodes": count, "collisions": total_collisions}
    return episodes, summary


# --------------------------------------------------------------------------
# observer-side episode model
# --------------------------------------------------------------------------


class DrivingEpisodeData:
    """Shared per-episode tensors for level-2 inference about any target.

    The observer sees the full state and all actions.  It reconstructs
    each driver's exact slot filter (assuming attentiveness), every car's
    planned path under each candidate goal, pairwise path conflicts, and
    each driver's awareness of each other car.  All level-likelihood
    queries then reduce to small tensor contractions.
    """

    def __init__(self, episode: Episode, cfg: DrivingConfig):
        self.episode = episode
        self.cfg = cfg
        self.T = episode.length
        self.ids = [a.id for a in episode.agents]
        self.n = len(self.ids)
        self.cars = [
            [car_from_payload(p) for p in s.state["cars"]] for s in episode.steps
        ]
        # keep car order aligned with self.ids
        for t in range(self.T):
            by_id = {c.id: c for c in self.cars[t]}
            self.cars[t] = [by_id[i] for i in self.ids]
        self.actions = [s.actions for s in episode.steps]
        self.honk_flags = [any(a == "H" for a in s.actions.values()) for s in episode.steps]
        self._built = False

    def goal_of(self, car_id: str) -> int:
        return self.episode.agent(car_id).goal

    def build(self) -> None:
        if self._built:
            return
        cfg, T, n = self.cfg, self.T, self.n
        nG = len(GOALS)
        H = cfg.horizon
        R = np.empty((T, n, nG, H + 1, 2))
        NR = np.empty((T, n, nG, H + 1, 2))
        MA = np.empty((T, n, nG), dtype=int)
        BAL = np.empty((T, n, H + 1, 2))
        for t in range(T):
            for j, car in enumerate(self.cars[t]):
                BAL[t, j] = ballistic_path(car, cfg)
                for g in range(nG):
                    R[t, j, g] = rollout_path(car, GOALS[g], cfg)
                    NR[t, j, g] = nominal_path(car, GOALS[g], cfg)
                    MA[t, j, g] = ACTIONS.index(move_action(car, GOALS[g], cfg))
        d = np.linalg.norm(
            R[:, :, :, None, None, 1:, :] - R[:, None, None, :, :, 1:, :], axis=-1
        )
        PC = (d < cfg.conflict_radius).any(axis=-1)  # (T, n, G, n, G)
        # route crossings at the intersection (time-free, nominal speeds):
        # the danger-signal trigger
        dx = np.linalg.norm(
            NR[:, :, :, None, None, 1:, None, :] - NR[:, None, None, :, :, None, 1:, :],
            axis=-1,
        )
        in_box = _in_box(NR[:, :, :, 1:, :], cfg)
        PCX = (
            (dx < cfg.conflict_radius)
            & in_box[:, :, :, None, None, :, None]
        ).any(axis=(-1, -2))
        db = np.linalg.norm(R[:, :, :, None, 1:, :] - BAL[:, None, None, :, 1:, :], axis=-1)
        PB = (db < cfg.conflict_radius).any(axis=-1)  # (T, n, G, n)

        V = np.zeros((T, n, n), dtype=bool)
        for t in range(T):
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    blockers = [c for k, c in enumerate(self.cars[t]) if k not in (i, j)]
                    V[t, i, j] = bool(
                        points_visible(
                            self.cars[t][i], self.cars[t][j].pos()[None, :], blockers, cfg
                        )[0]
                    )

        filters = [SlotFilter(cfg) for _ in range(n)]
        AW = np.zeros((T, n, n))
        HYPR = np.zeros((T, n, nG))
        SDANGER = np.zeros((T, n, nG))
        L0 = np.zeros((T, n, nG))
        for t in range(T):
            for j in range(n):
                vis_cars = [self.cars[t][k] for k in range(n) if V[t, j, k]]
                obs = DrivingObservation(
                    self.cars[t][j],
                    tuple((c.id, c) for c in vis_cars),
                    tuple(),
                    True,
                )
                filters[j].step(obs)
                for k in range(n):
                    if k != j:
                        AW[t, j, k] = filters[j].awareness_of(self.cars[t][k])
                skip = assigned_slots(vis_cars, cfg)
                a_obs = ACTIONS.index(self.actions[t][self.ids[j]])
                for g in range(nG):
                    HYPR[t, j, g] = slot_hypothesis_risk(R[t, j, g], filters[j], cfg, skip)
                    SDANGER[t, j, g] = slot_hypothesis_danger(
                        NR[t, j, g], self.cars[t][j], filters[j], vis_cars, cfg, skip
                    )
                    conflicts = [
                        1.0 if PB[t, j, g, k] else 0.0 for k in range(n) if V[t, j, k]
                    ]
                    inp = PlanInputs(
                        own_move_action=ACTIONS[MA[t, j, g]],
                        car_conflicts=conflicts,
                        hypothesis_risk=HYPR[t, j, g],
                        danger=0.0,
                    )
                    L0[t, j, g] = math.log(plan_action_probs(inp, cfg)[a_obs])
        self.R, self.MA, self.BAL, self.PC, self.PCX, self.PB = R, MA, BAL, PC, PCX, PB
        self.V, self.AW, self.HYPR, self.SDANGER, self.L0 = V, AW, HYPR, SDANGER, L0
        self._built = True

    def level1_posterior_rows(self, j: int) -> np.ndarray:
        """(T + 1, 3) exact goal posteriors for car j; row u uses steps < u."""
        self.build()
        out = np.zeros((self.T + 1, len(GOALS)))
        out[1:] = np.cumsum(self.L0[:, j, :], axis=0)
        m = out.max(axis=1, keepdims=True)
        w = np.exp(out - m)
        return w / w.sum(axis=1, keepdims=True)


class DrivingModel:
    """Engine surface for level-2 inference about one target car."""

    def __init__(self, data: DrivingEpisodeData, target_id: str):
        self.data = data
        self.cfg = data.cfg
        self.episode = data.episode
        self.episode_id = f"driving-{data.episode.kind}-{data.episode.seed}-{target_id}"
        self.target_id = target_id
        self.t_idx = data.ids.index(target_id)
        self.other_idx = [k for k in range(data.n) if k != self.t_idx]
        self.T = data.T
        nG = len(GOALS)
        self.top_space = HypothesisSpace(2, tuple(range(nG)), f"{target_id}-goal")
        self.lower_spaces = tuple(
            HypothesisSpace(1, tuple(range(nG)), f"{data.ids[k]}-goal") for k in self.other_idx
        )
        entries = tuple(
            itertools.product(range(nG), *[range(nG)] * len(self.other_idx))
        )
        self.joint_space = HypothesisSpace(2, entries, f"{target_id}-joint")
        self.n_actions = len(ACTIONS)

    # -- engine surface -------------------------------------------------------

    def lower_loglik(self, source: int) -> np.ndarray:
        self.data.build()
        return self.data.L0[:, self.other_idx[source], :]

    def _mode_term_arrays(self, upto: int, top_idx: int, trajs):
        """Per-step risk and danger for the target under one goal."""
        d = self.data
        cfg = self.cfg
        i = self.t_idx
        sl = slice(0, upto)
        safe = np.ones(upto)
        dense_b = []
        for s_pos, k in enumerate(self.other_idx):
            idx, beliefs = trajs[s_pos]
            idx = np.asarray(idx)
            b = beliefs[:upto]
            pc = d.PC[sl, i, top_idx, k, :][:, idx]  # (t, N)
            risk_k = (pc * b).sum(axis=1)
            risk_k = np.where(d.V[sl, i, k], risk_k, 0.0)
            safe *= 1.0 - np.clip(risk_k, 0.0, 1.0)
            dense = np.zeros((upto, len(GOALS)))
            np.add.at(dense.T, idx, b.T)
            dense_b.append(dense)
        risk = 1.0 - safe * (1.0 - d.HYPR[sl, i, top_idx])

        danger_safe = 1.0 - d.SDANGER[sl, i, top_idx]
        for s_pos, j in enumerate(self.other_idx):
            vis_ij = d.V[sl, i, j]
            unaware_ji = d.AW[sl, j, i] < cfg.p_aware
            pc_ji = d.PCX[sl, j, :, i, top_idx]  # (t, G) over j's goal
            conf_ji = (pc_ji * dense_b[s_pos]).sum(axis=1)
            term = np.where(vis_ij & unaware_ji, np.clip(conf_ji, 0, 1), 0.0)
            danger_safe *= 1.0 - term
            for k_pos, k in enumerate(self.other_idx):
                if k == j:
                    continue
                vis_ik = d.V[sl, i, k]
                unaware_jk = d.AW[sl, j, k] < cfg.p_aware
                pc_jk = d.PCX[sl, j, :, k, :]  # (t, G, G)
                conf_jk = np.einsum("tab,ta,tb->t", pc_jk, dense_b[s_pos], dense_b[k_pos])
                term = np.where(vis_ij & vis_ik & unaware_jk, np.clip(conf_jk, 0, 1), 0.0)
                danger_safe *= 1.0 - term
        danger = 1.0 - danger_safe
        return risk, danger

    def _action_prob_rows(self, upto: int, top_idx: int, trajs) -> np.ndarray:
        """(upto, 5) policy rows of the target given nested goal beliefs."""
        self.data.build()
        cfg = self.cfg
        risk, danger = self._mode_term_arrays(upto, top_idx, trajs)
        scores = np.stack(
            [
                cfg.progress_reward - cfg.risk_weight * risk,
                np.full(upto, -cfg.stop_penalty),
                np.where(danger >= cfg.signal_threshold, cfg.signal_score, -np.inf),
            ],
            axis=1,
        )
        scaled = cfg.beta * scores
        scaled -= scaled.max(axis=1, keepdims=True)
        soft = np.exp(scaled)
        soft /= soft.sum(axis=1, keepdims=True)
        rows = np.zeros((upto, len(ACTIONS)))
        ma = self.data.MA[:upto, self.t_idx, top_idx]
        rows[np.arange(upto), ma] += soft[:, 0]
        rows[:, ACTIONS.index("B")] += soft[:, 1]
        rows[:, ACTIONS.index("H")] += soft[:, 2]
        rows = (1.0 - cfg.floor * len(ACTIONS)) * rows + cfg.floor
        return rows / rows.sum(axis=1, keepdims=True)

    def top_loglik_sum(self, t, top_idx, trajs) -> float:
        if t == 0:
            return 0.0
        rows = self._action_prob_rows(t, top_idx, trajs)
        obs = np.array(
            [ACTIONS.index(self.data.actions[s][self.target_id]) for s in range(t)]
        )
        return float(np.log(rows[np.arange(t), obs]).sum())

    def predict_policy(self, t, top_idx, beliefs) -> np.ndarray:
        # beliefs hold the nested posteriors entering step t; reuse the
        # vectorized assembly on a one-step window ending at t
        trajs = []
        for idx, b_final in beliefs:
            rows = np.tile(np.asarray(b_final), (t + 1, 1))
            trajs.append((np.asarray(idx), rows))
        sub = _SingleStepView(self, t)
        return sub._action_prob_rows_at(top_idx, trajs)

    def lower_features(self, source: int, t: int) -> np.ndarray:
        return self._features_for(self.data.ids[self.other_idx[source]], t)

    def top_features(self, t: int) -> np.ndarray:
        return self._features_for(self.target_id, t)

    def _features_for(self, car_id: str, t: int) -> np.ndarray:
        d = self.data
        col = d.ids.index(car_id)
        states = [d.cars[s][col] for s in range(d.T)]
        acts = [d.actions[s].get(car_id) for s in range(d.T)]
        return featurize_driving(states, acts, d.honk_flags, t, self.cfg)

    # -- harness metadata -------------------------------------------------------

    def true_top_idx(self) -> int:
        return self.data.goal_of(self.target_id)

    def true_lower_idx(self, source: int) -> int:
        return self.data.goal_of(self.data.ids[self.other_idx[source]])

    def observed_action_idx(self, t: int) -> int:
        return ACTIONS.index(self.data.actions[t][self.target_id])


class _SingleStepView:
    """Evaluates the target's policy at one step with fixed beliefs."""

    def __init__(self, model: DrivingModel, t: int):
        self.model = model
        self.t = t

    def _action_prob_rows_at(self, top_idx: int, trajs) -> np.ndarray:
        m = self.model
        upto = self.t + 1
        rows = m._action_prob_rows(upto, top_idx, trajs)
        return rows[-1]


# --------------------------------------------------------------------------
# scripted signaling scenario
# --------------------------------------------------------------------------


def build_scripted_episode(
    cars: Sequence[CarState],
    goals: Sequence[int],
    scripts: Sequence[Sequence[str]],
    cfg: DrivingConfig,
    kind: str = "scripted",
    levels: Sequence[int] = (),
) -> Episode:
    """Roll scripted action sequences through the kinematics and record a
    full episode (observations reconstructed per driver, all attentive)."""
    cars = list(cars)
    T = len(scripts[0])
    steps = []
    honks_prev: list[str] = []
    for t in range(T):
        actions = {c.id: scripts[k][t] for k, c in enumerate(cars)}
        obs_payloads = {
            c.id: obs_payload(observe(cars, c.id, cfg, honks_prev, True)) for c in cars
        }
        steps.append(EpisodeStep(state_payload_driving(cars, cfg), actions, obs_payloads))
        honks_prev = [cid for cid, a in actions.items() if a == "H"]
        cars = [kinematics_step(c, actions[c.id], cfg) for c in cars]
    lv = list(levels) if levels else [1] * len(cars)
    agents = tuple(AgentRole(c.id, lv[k], goals[k]) for k, c in enumerate(cars))
    return Episode(env="driving", seed=0, kind=kind, agents=agents, steps=tuple(steps))


def signaling_scenario(cfg: Optional[DrivingConfig] = None) -> Episode:
    """Occlusion scenario where signaling is the rational action.

    A green car rolls up from the south, braking for a left turn whose
    route crosses the path of a red car coming fast from the east.  The
    corner building and red's field of view keep green hidden from red
    for the whole approach, so red's belief leaves almost no mass where
    green actually waits; green, who has seen red, infers that red is
    about to cross green's claimed route unaware of it.  Honking is then
    the level-1 planner's best action, and a level-2 observer predicting
    green's next action picks honking too.
    """
    cfg = cfg or DrivingConfig()
    green0 = CarState("green", cfg.lane_offset, -9.0, math.pi / 2, 4.0)
    red0 = CarState("red", 24.0, cfg.lane_offset, math.pi, 5.0)
    T = 7
    green_script = ["B"] * (T - 2) + ["L", "B"]
    red_script = ["A"] * T
    return build_scripted_episode(
        [green0, red0],
        [GOALS.index("left"), GOALS.index("forward")],
        [green_script, red_script],
        cfg,
        kind="signaling",
    )


def ascii_frame(cars: Sequence[CarState], cfg: DrivingConfig, half: float = 20.0,
                cell: float = 2.0) -> str:
    """Coarse text rendering of the scene for debugging dumps."""
    n = int(2 * half / cell)
    grid = [[" " for _ in range(n)] for _ in range(n)]
    for rect in cfg.buildings():
        for r in range(n):
            for c in range(n):
                x = -half + (c + 0.5) * cell
                y = half - (r + 0.5) * cell
                if rect[0] <= x <= rect[1] and rect[2] <= y <= rect[3]:
                    grid[r][c] = "#"
    for car in cars:
        c = int((car.x + half) / cell)
        r = int((half - car.y) / cell)
        if 0 <= r < n and 0 <= c < n:
            grid[r][c] = car.id[0].upper()
    return "\n".join("".join(row) for row in grid)
