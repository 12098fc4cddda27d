"""Synthetic single-corridor driving world.

Scenes are expressed in the ego frame at t=0: the ego sits at the origin with
heading 0 on the corridor centerline. The corridor runs straight behind the
ego and, for turn commands, bends with constant curvature ahead of it.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum, IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import HORIZON, N_WAYPOINTS, SIM_DT, SUBSTEPS, WAYPOINT_DT, Mode, Trajectory, sweep
from .geometry import (Polyline, headings_from_velocity, hermite_densify, rect_corners, rects_overlap,
                       segments_intersect, wrap_angle)

SCHEMA_VERSION = 1


class GenerationExhausted(RuntimeError):
    """No scene satisfying the requested level was found within the attempt budget."""


class InfeasibleScene(RuntimeError):
    """The expert planner cannot produce a collision-free plan."""


class NavCommand(str, Enum):
    MOVE_FORWARD = "MoveForward"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"


class LaneAssignment(str, Enum):
    EGO_LANE = "EgoLane"
    ADJACENT_LANE = "AdjacentLane"
    CROSSING = "Crossing"


class ComplexityLevel(IntEnum):
    LEVEL1 = 1
    LEVEL2 = 2
    LEVEL3 = 3

    @property
    def challenging(self) -> int:
        """Binary scene tag: 0 for simple (Level 1), 1 for challenging (Levels 2-3)."""
        return 0 if self is ComplexityLevel.LEVEL1 else 1


@dataclass(frozen=True)
class WorldConfig:
    # ego footprint and kinematic ranges
    ego_length: float = 4.5
    ego_width: float = 2.0
    speed_min: float = 4.0
    speed_max: float = 14.0
    v_max: float = 20.0
    turn_min_speed: float = 6.0
    # lateral accelerations (m/s^2) a turn command bends the road with
    turn_lat_accels: tuple = (0.8, 1.6, 2.4)
    command_mix: tuple = (0.5, 0.25, 0.25)
    # corridor
    lane_width: float = 3.5
    wide_half_width: tuple = (2.3, 3.3)
    narrow_half_width: tuple = (1.45, 1.85)
    corridor_behind: float = 20.0
    corridor_ahead: float = 110.0
    corridor_spacing: float = 1.0
    max_turn_angle: float = 2.8
    # classification thresholds
    d_bound: float = 1.0
    interaction_range: float = 40.0
    merge_longitudinal: float = 25.0
    merge_lateral_speed: float = 0.2
    crossing_time_gap: float = 2.0
    level_mix: tuple = (0.4, 0.3, 0.3)
    # share of far distractors that are stopped adjacent-lane vehicles
    parked_share: float = 0.3
    max_attempts: int = 1000
    # expert longitudinal controller
    idm_accel: float = 1.5
    idm_decel: float = 2.0
    idm_headway: float = 1.5
    idm_min_gap: float = 2.5
    max_brake: float = 3.5
    max_jerk: float = 6.0
    yield_margin: float = 0.5
    # observation normalization
    obs_speed_scale: float = 15.0
    obs_accel_scale: float = 3.0
    obs_curv_scale: float = 2.4
    obs_near: float = 20.0
    obs_rel_speed_scale: float = 10.0
    obs_clearance_scale: float = 2.0

    def __post_init__(self):
        positive = ("ego_length", "ego_width", "speed_min", "v_max", "lane_width",
                    "corridor_behind", "corridor_ahead", "corridor_spacing", "d_bound",
                    "interaction_range", "merge_longitudinal", "crossing_time_gap")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.speed_min <= self.speed_max <= self.v_max:
            raise ValueError("need speed_min <= speed_max <= v_max")
        for name in ("wide_half_width", "narrow_half_width"):
            lo, hi = getattr(self, name)
            if not (self.ego_width / 2 < lo <= hi):
                raise ValueError(f"{name} must exceed the ego half-width")
        for name in ("level_mix", "command_mix"):
            mix = getattr(self, name)
            if len(mix) != 3 or min(mix) < 0 or not math.isclose(sum(mix), 1.0):
                raise ValueError(f"{name} must be three non-negative weights summing to 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if not 0 <= self.parked_share <= 1:
            raise ValueError("parked_share must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, data: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**conv)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


DEFAULT_WORLD = WorldConfig()


@dataclass(frozen=True)
class EgoState:
    position: tuple = (0.0, 0.0)
    heading: float = 0.0
    speed: float = 0.0
    acceleration: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        vals = (*self.position, self.heading, self.speed, self.acceleration)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("ego state must be finite")
        if self.speed < 0:
            raise ValueError("ego speed must be >= 0")
        if not -math.pi < self.heading <= math.pi:
            raise ValueError("ego heading must lie in (-pi, pi]")

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])


@dataclass(frozen=True)
class HistoryFrame:
    t: float
    position: tuple
    heading: float
    speed: float


@dataclass(frozen=True)
class History:
    frames: tuple

    def __post_init__(self):
        if len(self.frames) != 3:
            raise ValueError("history holds exactly three frames")
        times = [f.t for f in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("history timestamps must be strictly increasing")


@dataclass(frozen=True, eq=False)
class Agent:
    id: int
    length: float
    width: float
    position: tuple
    heading: float
    velocity: tuple
    lane_assignment: LaneAssignment
    future_track: np.ndarray  # (9, 2) positions at t = 0, 0.5, ..., 4.0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("agent footprint dimensions must be positive")
        track = np.array(self.future_track, dtype=float)
        if track.shape != (N_WAYPOINTS + 1, 2):
            raise ValueError("future_track must cover the planning horizon at 0.5 s")
        track.setflags(write=False)
        object.__setattr__(self, "future_track", track)
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "lane_assignment", LaneAssignment(self.lane_assignment))

    @cached_property
    def dense(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Positions, velocities and headings at 0.1 s over the horizon."""
        pos, vel = hermite_densify(self.future_track, np.asarray(self.velocity), WAYPOINT_DT, SUBSTEPS)
        head = headings_from_velocity(vel, self.heading)
        return pos, vel, head


@dataclass(frozen=True, eq=False)
class LaneCorridor:
    centerline: np.ndarray
    half_width: float

    def __post_init__(self):
        pts = np.array(self.centerline, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")

    @cached_property
    def line(self) -> Polyline:
        return Polyline(self.centerline)

    @property
    def left_boundary(self) -> np.ndarray:
        return self.line.offset(self.half_width)

    @property
    def right_boundary(self) -> np.ndarray:
        return self.line.offset(-self.half_width)


@dataclass(frozen=True)
class CriticalObjects:
    cipo1: Optional[int]
    cipo2: tuple
    motion_interaction: tuple
    boundary_proximity: bool
    boundary_distance: float

    @property
    def any_agent(self) -> bool:
        return self.cipo1 is not None or bool(self.cipo2) or bool(self.motion_interaction)


@dataclass(eq=False)
class Scene:
    ego: EgoState
    command: NavCommand
    history: History
    agents: tuple
    corridor: LaneCorridor
    seed: int
    config: WorldConfig = field(default=DEFAULT_WORLD, repr=False)

    def __post_init__(self):
        self.command = NavCommand(self.command)
        self.agents = tuple(self.agents)
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        _, _, dist = self.corridor.line.project(np.array(self.ego.position))
        if float(dist) > self.corridor.half_width:
            raise ValueError("ego must start inside the corridor")

    @cached_property
    def critical(self) -> CriticalObjects:
        return classify_critical_objects(self)

    @cached_property
    def complexity(self) -> ComplexityLevel:
        return classify_complexity(self)

    @cached_property
    def expert(self) -> Trajectory:
        return expert_plan(self)

    @property
    def tag(self) -> int:
        return self.complexity.challenging

    def agent(self, agent_id: int) -> Agent:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)


# ---------------------------------------------------------------- corridor

def build_centerline(curvature: float, cfg: WorldConfig = DEFAULT_WORLD) -> np.ndarray:
    """Straight behind the ego, constant curvature ahead, straight after max_turn_angle."""
    s = np.arange(-cfg.corridor_behind, cfg.corridor_ahead + 1e-9, cfg.corridor_spacing)
    pts = np.zeros((len(s), 2))
    pts[:, 0] = s
    if curvature == 0.0:
        return pts
    k = curvature
    s_turn = cfg.max_turn_angle / abs(k)
    ahead = s > 0
    sa = np.minimum(s[ahead], s_turn)
    x = np.sin(k * sa) / k
    y = (1.0 - np.cos(k * sa)) / k
    extra = np.maximum(s[ahead] - s_turn, 0.0)
    theta = k * sa
    pts[ahead, 0] = x + extra * np.cos(theta)
    pts[ahead, 1] = y + extra * np.sin(theta)
    return pts


def road_curvature(scene: Scene, lookahead: float = 10.0) -> float:
    line = scene.corridor.line
    s0, _, _ = line.project(np.array(scene.ego.position))
    _, h0 = line.pose_at(float(s0) + 0.5)
    _, h1 = line.pose_at(float(s0) + lookahead)
    return float(wrap_angle(h1 - h0)) / (lookahead - 0.5)


# ---------------------------------------------------------- classification

def _lane_frame(scene: Scene, pts: np.ndarray):
    s, d, _ = scene.corridor.line.project(pts)
    return s, d


def _ego_s(scene: Scene) -> float:
    s, _ = _lane_frame(scene, np.array(scene.ego.position))
    return float(s)


def nominal_path(scene: Scene) -> np.ndarray:
    """Centerline positions at 0.1 s if the ego held its current speed (41, 2)."""
    t = np.arange(N_WAYPOINTS * SUBSTEPS + 1) * SIM_DT
    pts, _ = scene.corridor.line.pose_at(_ego_s(scene) + scene.ego.speed * t)
    return pts


def _in_ego_lane_ahead(scene: Scene, agent: Agent, max_range: float) -> Optional[float]:
    cfg = scene.config
    corners = rect_corners(np.array(agent.position), agent.heading, agent.length, agent.width)
    s_c, d_c = _lane_frame(scene, corners)
    s_a, _ = _lane_frame(scene, np.array(agent.position))
    gap = float(s_a) - _ego_s(scene)
    half = cfg.lane_width / 2
    occupies = d_c.min() < half and d_c.max() > -half
    if occupies and 0 < gap <= max_range:
        return gap
    return None


def _is_merging(scene: Scene, agent: Agent) -> bool:
    cfg = scene.config
    line = scene.corridor.line
    s_a, d_a = _lane_frame(scene, np.array(agent.position))
    half = cfg.lane_width / 2
    if not half < abs(float(d_a)) <= half + cfg.lane_width:
        return False
    if abs(float(s_a) - _ego_s(scene)) > cfg.merge_longitudinal:
        return False
    _, lane_heading = line.pose_at(float(s_a))
    normal = np.array([-math.sin(lane_heading), math.cos(lane_heading)])
    lateral_speed = float(np.dot(np.asarray(agent.velocity), normal))
    toward = -math.copysign(1.0, float(d_a)) * lateral_speed
    return toward > cfg.merge_lateral_speed


def crossing_times(scene: Scene, agent: Agent, path: Optional[np.ndarray] = None):
    """Arrival times (ego, agent) at each crossing of the agent track with the ego path."""
    if path is None:
        path = nominal_path(scene)
    track = agent.dense[0]
    p, p2 = path[:-1, None, :], path[1:, None, :]
    q, q2 = track[None, :-1, :], track[None, 1:, :]
    hit, u, v = segments_intersect(p, p2, q, q2)
    i, j = np.nonzero(hit)
    t_ego = (i + u[i, j]) * SIM_DT
    t_agent = (j + v[i, j]) * SIM_DT
    return t_ego, t_agent


def classify_critical_objects(scene: Scene) -> CriticalObjects:
    cfg = scene.config
    cipo1, best = None, math.inf
    for agent in scene.agents:
        gap = _in_ego_lane_ahead(scene, agent, cfg.interaction_range)
        if gap is not None and gap < best:
            cipo1, best = agent.id, gap
    cipo2 = tuple(a.id for a in scene.agents if a.id != cipo1 and _is_merging(scene, a))
    taken = set(cipo2) | {cipo1}
    path = nominal_path(scene)
    mi = []
    for agent in scene.agents:
        if agent.id in taken:
            continue
        t_ego, t_agent = crossing_times(scene, agent, path)
        if np.any(np.abs(t_ego - t_agent) < cfg.crossing_time_gap):
            mi.append(agent.id)
    near, dist = _boundary_state(scene, cipo1, cipo2, tuple(mi))
    return CriticalObjects(cipo1, cipo2, tuple(mi), near, dist)


def _boundary_state(scene, cipo1, cipo2, mi):
    cfg = scene.config
    traj = _expert_from(scene, cipo1, cipo2, mi)
    pos, _, head = sweep(traj.waypoints, scene.ego)
    corners = rect_corners(pos, head, cfg.ego_length, cfg.ego_width)
    _, lateral, _ = scene.corridor.line.project(corners)
    clearance = float(scene.corridor.half_width - np.abs(lateral).max())
    return clearance < cfg.d_bound, clearance


def classify_complexity(scene: Scene) -> ComplexityLevel:
    crit = scene.critical
    return ComplexityLevel(1 + int(crit.boundary_proximity) + int(crit.any_agent))


# ------------------------------------------------------------------ expert

def expert_plan(scene: Scene) -> Trajectory:
    """Centerline-following IDM plan that yields to crossing agents."""
    crit = scene.critical
    return _expert_from(scene, crit.cipo1, crit.cipo2, crit.motion_interaction)


def _obstacles(scene: Scene, cipo2: Sequence[int], mi: Sequence[int]):
    """Longitudinal obstacles as (rear-edge arc position, speed, active) arrays at 0.1 s."""
    cfg = scene.config
    line = scene.corridor.line
    n = N_WAYPOINTS * SUBSTEPS + 1
    obstacles = []
    leads = [a for a in scene.agents
             if a.id in cipo2 or _in_ego_lane_ahead(scene, a, math.inf) is not None]
    for agent in leads:
        pos, _, _ = agent.dense
        s, _, _ = line.project(pos)
        v = np.gradient(s, SIM_DT)
        obstacles.append((s - agent.length / 2, v, np.ones(n, dtype=bool)))
    path_s = _ego_s(scene) + np.linspace(0.0, cfg.corridor_ahead - 1.0, 400)
    path, _ = line.pose_at(path_s)
    for aid in mi:
        agent = scene.agent(aid)
        pos, _, _ = agent.dense
        hit, u, _ = segments_intersect(path[:-1, None], path[1:, None], pos[None, :-1], pos[None, 1:])
        i, j = np.nonzero(hit)
        if len(i) == 0:
            continue
        k = np.argmin(i + u[i, j])
        s_cross = path_s[i[k]] + u[i[k], j[k]] * (path_s[1] - path_s[0])
        reach = max(agent.length, agent.width) / 2 + cfg.ego_width / 2 + cfg.yield_margin
        _, lateral, _ = line.project(pos)
        s_agent, _, _ = line.project(pos)
        blocking = (np.abs(lateral) < reach) & (np.abs(s_agent - s_cross) < reach + 5.0)
        if not blocking.any():
            active = np.zeros(n, dtype=bool)
        else:
            last = int(np.nonzero(blocking)[0].max())
            active = np.arange(n) <= last if last < n - 1 else np.ones(n, dtype=bool)
        wall = s_cross - max(agent.length, agent.width) / 2 - cfg.yield_margin
        obstacles.append((np.full(n, wall), np.zeros(n), active))
    return obstacles


def _expert_from(scene: Scene, cipo1, cipo2, mi) -> Trajectory:
    cfg = scene.config
    ego = scene.ego
    obstacles = _obstacles(scene, cipo2, mi)
    v_des = max(ego.speed, 1.0)
    sqrt_ab = math.sqrt(cfg.idm_accel * cfg.idm_decel)
    s = _ego_s(scene)
    v = ego.speed
    a_prev = ego.acceleration
    samples = [s]
    front = cfg.ego_length / 2
    for step in range(N_WAYPOINTS * SUBSTEPS):
        free = cfg.idm_accel * (1.0 - (v / v_des) ** 4)
        a = free
        for rear, v_obs, active in obstacles:
            if not active[step] or rear[step] < s - front:
                continue
            gap = max(rear[step] - (s + front), 0.05)
            s_star = cfg.idm_min_gap + max(0.0, v * cfg.idm_headway + v * (v - v_obs[step]) / (2 * sqrt_ab))
            a = min(a, free - cfg.idm_accel * (s_star / gap) ** 2)
        a = min(max(a, -cfg.max_brake), cfg.idm_accel)
        lim = cfg.max_jerk * SIM_DT
        a = min(max(a, a_prev - lim), a_prev + lim)
        v_new = max(0.0, v + a * SIM_DT)
        s += 0.5 * (v + v_new) * SIM_DT
        a_prev = (v_new - v) / SIM_DT
        v = v_new
        samples.append(s)
    s_wp = np.array(samples)[SUBSTEPS::SUBSTEPS]
    world, _ = scene.corridor.line.pose_at(s_wp)
    return Trajectory(_to_ego(world, ego))


def _to_ego(world_pts: np.ndarray, ego: EgoState) -> np.ndarray:
    rel = np.asarray(world_pts) - np.asarray(ego.position)
    c, s = math.cos(-ego.heading), math.sin(-ego.heading)
    return np.stack([c * rel[..., 0] - s * rel[..., 1], s * rel[..., 0] + c * rel[..., 1]], axis=-1)


# --------------------------------------------------------------- generator

def _lane_agent(line: Polyline, agent_id: int, s_t: np.ndarray, d_t: np.ndarray,
                length: float, width: float, lane: LaneAssignment) -> Agent:
    pts, lane_heading = line.pose_at(s_t, d_t)
    ds = np.gradient(s_t, WAYPOINT_DT)
    dd = np.gradient(d_t, WAYPOINT_DT)
    heading = float(wrap_angle(lane_heading[0] + math.atan2(dd[0], ds[0]))) if ds[0] > 1e-6 or abs(dd[0]) > 1e-6 \
        else float(wrap_angle(lane_heading[0]))
    vx = ds[0] * math.cos(lane_heading[0]) - dd[0] * math.sin(lane_heading[0])
    vy = ds[0] * math.sin(lane_heading[0]) + dd[0] * math.cos(lane_heading[0])
    return Agent(agent_id, length, width, tuple(pts[0]), heading, (vx, vy), lane, pts)


def _profile(s0: float, v0: float, decel: float) -> np.ndarray:
    t = np.arange(N_WAYPOINTS + 1) * WAYPOINT_DT
    if decel <= 0:
        return s0 + v0 * t
    t_stop = v0 / decel
    tt = np.minimum(t, t_stop)
    return s0 + v0 * tt - 0.5 * decel * tt**2


def _car_size(rng) -> tuple[float, float]:
    return float(rng.uniform(4.0, 5.0)), float(rng.uniform(1.8, 2.0))


def _draw_lead(rng, line, agent_id, v0, cfg):
    length, width = _car_size(rng)
    kind = rng.choice(3, p=(0.25, 0.45, 0.30))
    if kind == 0:
        v_lead, decel = 0.0, 0.0
    elif kind == 1:
        v_lead, decel = float(rng.uniform(0.2, 0.8) * v0), 0.0
    else:
        v_lead, decel = float(rng.uniform(0.6, 1.0) * v0), float(rng.uniform(1.0, 3.0))
    closing = max(v0 - v_lead, 0.0)
    min_gap = closing**2 / (2 * 2.5) + (length + cfg.ego_length) / 2 + cfg.idm_min_gap + 2.0
    lo = max(min_gap, 10.0)
    if lo >= cfg.interaction_range - 1.0:
        lo = cfg.interaction_range - 2.0
    gap = float(rng.uniform(lo, cfg.interaction_range - 1.0))
    s_t = _profile(gap, v_lead, decel)
    d_t = np.zeros_like(s_t)
    return _lane_agent(line, agent_id, s_t, d_t, length, width, LaneAssignment.EGO_LANE)


def _draw_merger(rng, line, agent_id, v0, cfg):
    length, width = _car_size(rng)
    side = float(rng.choice([-1.0, 1.0]))
    s0 = float(rng.uniform(8.0, cfg.merge_longitudinal))
    v = float(rng.uniform(0.6, 1.0) * v0)
    v_lat = float(rng.uniform(0.6, 1.5))
    t = np.arange(N_WAYPOINTS + 1) * WAYPOINT_DT
    d_t = side * np.maximum(cfg.lane_width - v_lat * t, 0.0)
    s_t = s0 + v * t
    return _lane_agent(line, agent_id, s_t, d_t, length, width, LaneAssignment.ADJACENT_LANE)


def _draw_crossing(rng, line, agent_id, v0, cfg):
    speed = float(rng.uniform(1.5, 8.0))
    if speed < 2.5:
        length, width = 0.8, 0.8
    elif speed < 5.0:
        length, width = 1.8, 0.8
    else:
        length, width = _car_size(rng)
    stop = v0**2 / (2 * 2.5) + cfg.ego_length + 6.0
    t_ego = float(rng.uniform(1.5, 3.5))
    s_c = max(v0 * t_ego, stop)
    t_ego = s_c / v0
    if t_ego > HORIZON - 0.3:
        s_c = v0 * (HORIZON - 0.3)
        t_ego = HORIZON - 0.3
    t_agent = float(np.clip(t_ego + rng.uniform(-1.5, 1.5), 0.4, HORIZON))
    side = float(rng.choice([-1.0, 1.0]))
    p_c, h_c = line.pose_at(s_c)
    normal = np.array([-math.sin(h_c), math.cos(h_c)])
    direction = -side * normal
    t = np.arange(N_WAYPOINTS + 1) * WAYPOINT_DT
    pts = p_c[None, :] + direction[None, :] * speed * (t - t_agent)[:, None]
    heading = math.atan2(direction[1], direction[0])
    vel = tuple(direction * speed)
    return Agent(agent_id, length, width, tuple(pts[0]), float(wrap_angle(heading)), vel,
                 LaneAssignment.CROSSING, pts)


def _draw_parallel(rng, line, agent_id, v0, cfg, near: bool):
    length, width = _car_size(rng)
    side = float(rng.choice([-1.0, 1.0]))
    if near:
        s0 = float(rng.uniform(-15.0, cfg.interaction_range - 2.0))
    else:
        s0 = float(rng.uniform(cfg.interaction_range + 12.0, cfg.interaction_range + 45.0))
    v = float(rng.uniform(0.9, 1.2) * v0)
    t = np.arange(N_WAYPOINTS + 1) * WAYPOINT_DT
    s_t = s0 + v * t
    d_t = np.full_like(s_t, side * cfg.lane_width)
    return _lane_agent(line, agent_id, s_t, d_t, length, width, LaneAssignment.ADJACENT_LANE)


def _draw_parked(rng, line, agent_id, v0, cfg):
    length, width = _car_size(rng)
    side = float(rng.choice([-1.0, 1.0]))
    s0 = float(rng.uniform(cfg.interaction_range + 12.0, cfg.interaction_range + 45.0))
    s_t = np.full(N_WAYPOINTS + 1, s0)
    d_t = np.full_like(s_t, side * cfg.lane_width)
    return _lane_agent(line, agent_id, s_t, d_t, length, width, LaneAssignment.ADJACENT_LANE)


def _draw_far_lead(rng, line, agent_id, v0, cfg):
    length, width = _car_size(rng)
    s0 = float(rng.uniform(cfg.interaction_range + 12.0, cfg.interaction_range + 45.0))
    v = float(rng.uniform(1.0, 1.3) * v0)
    s_t = _profile(s0, v, 0.0)
    return _lane_agent(line, agent_id, s_t, np.zeros_like(s_t), length, width, LaneAssignment.EGO_LANE)


def _history(v0: float, a0: float) -> History:
    frames = []
    for k in (3, 2, 1):
        t = -k * WAYPOINT_DT
        v = max(v0 + a0 * t, 0.0)
        x = v0 * t + 0.5 * a0 * t**2
        frames.append(HistoryFrame(t, (x, 0.0), 0.0, v))
    return History(tuple(frames))


def _attempt(rng, seed: int, want_near: bool, want_critical: bool, cfg: WorldConfig) -> Scene:
    cmd_idx = int(rng.choice(3, p=cfg.command_mix))
    command = (NavCommand.MOVE_FORWARD, NavCommand.TURN_LEFT, NavCommand.TURN_RIGHT)[cmd_idx]
    lo = cfg.speed_min if command is NavCommand.MOVE_FORWARD else max(cfg.speed_min, cfg.turn_min_speed)
    v0 = float(rng.uniform(lo, cfg.speed_max))
    a0 = float(rng.uniform(-0.3, 0.3))
    curvature = 0.0
    if command is not NavCommand.MOVE_FORWARD:
        lat = float(rng.choice(cfg.turn_lat_accels))
        sign = 1.0 if command is NavCommand.TURN_LEFT else -1.0
        curvature = sign * lat / v0**2
    hw_range = cfg.narrow_half_width if want_near else cfg.wide_half_width
    half_width = float(rng.uniform(*hw_range))
    corridor = LaneCorridor(build_centerline(curvature, cfg), half_width)
    line = corridor.line

    agents = []
    next_id = iter(range(1, 1000))
    if want_critical:
        kinds = [int(rng.choice(3, p=(0.5, 0.25, 0.25)))]
        if rng.random() < 0.3:
            kinds.append(int(rng.choice(3, p=(0.5, 0.25, 0.25))))
        for kind in sorted(set(kinds)):
            draw = (_draw_lead, _draw_merger, _draw_crossing)[kind]
            agents.append(draw(rng, line, next(next_id), v0, cfg))
        if rng.random() < 0.5:
            agents.append(_draw_parallel(rng, line, next(next_id), v0, cfg, near=True))
    moving = (1.0 - cfg.parked_share) / 2
    for _ in range(int(rng.integers(0, 3))):
        kind = int(rng.choice(3, p=(moving, moving, cfg.parked_share)))
        if kind == 0:
            agents.append(_draw_far_lead(rng, line, next(next_id), v0, cfg))
        elif kind == 1:
            agents.append(_draw_parallel(rng, line, next(next_id), v0, cfg, near=False))
        else:
            agents.append(_draw_parked(rng, line, next(next_id), v0, cfg))
    if not want_critical:
        agents = [a for a in agents
                  if np.hypot(*a.position) > cfg.interaction_range]
    ego = EgoState((0.0, 0.0), 0.0, v0, a0)
    return Scene(ego, command, _history(v0, a0), tuple(agents), corridor, seed, cfg)


def _expert_is_safe(scene: Scene) -> bool:
    """No footprint contact of any kind (not-at-fault included) and full corridor containment."""
    from .metrics import drivable_area_compliance

    cfg = scene.config
    traj = scene.expert
    pos, _, head = sweep(traj.waypoints, scene.ego)
    for agent in scene.agents:
        apos, _, ahead = agent.dense
        if np.any(rects_overlap(pos, head, cfg.ego_length, cfg.ego_width, apos, ahead, agent.length, agent.width)):
            return False
    return drivable_area_compliance(traj, scene) == 1


def _seed_rng(seed: int, level_target: Optional[ComplexityLevel]) -> np.random.Generator:
    tag = 0 if level_target is None else int(level_target)
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, tag])


def generate_scene(seed: int, level_target: Optional[ComplexityLevel] = None,
                   config: WorldConfig = DEFAULT_WORLD) -> Scene:
    """Draw a scene deterministically from ``seed``.

    With ``level_target`` set, internal draws are repeated until the classified
    level matches (up to ``config.max_attempts`` attempts).
    """
    rng = _seed_rng(seed, level_target)
    target = level_target
    if target is None:
        target = ComplexityLevel(1 + int(rng.choice(3, p=config.level_mix)))
    target = ComplexityLevel(target)
    for _ in range(config.max_attempts):
        if target is ComplexityLevel.LEVEL1:
            near, crit = False, False
        elif target is ComplexityLevel.LEVEL3:
            near, crit = True, True
        else:
            near = bool(rng.random() < 0.5)
            crit = not near
        scene = _attempt(rng, seed, near, crit, config)
        if scene.complexity is not target:
            continue
        if not _expert_is_safe(scene):
            continue
        return scene
    raise GenerationExhausted(f"no {target.name} scene for seed {seed} in {config.max_attempts} attempts")


def generate_dataset(n: int, seed: int, config: WorldConfig = DEFAULT_WORLD) -> list[Scene]:
    """``n`` scenes with levels drawn from ``config.level_mix``; scene seeds derive from ``seed``."""
    seeds = np.random.SeedSequence(int(seed)).generate_state(n, dtype=np.uint64)
    return [generate_scene(int(s), None, config) for s in seeds]


# ------------------------------------------------------------- observation

BASE_FEATURES = (
    "bias", "speed", "accel", "cmd_forward", "cmd_left", "cmd_right", "road_curvature",
    "nearest_agent_near", "nearest_agent_mid", "nearest_agent_far",
    "boundary_tight", "boundary_open",
)
THINK_FEATURES = (
    "cipo1_distance", "cipo1_rel_speed", "merge_flag", "merge_distance",
    "crossing_time", "crossing_distance", "boundary_clearance",
)
F_BASE = len(BASE_FEATURES)
F_FULL = F_BASE + len(THINK_FEATURES)


def observe(scene: Scene, mode: Mode, normalize: bool = True) -> np.ndarray:
    """Feature vector of the scene as seen in ``mode``.

    Base features (both modes, in order): bias 1; speed / obs_speed_scale;
    acceleration / obs_accel_scale; command one-hot (forward, left, right);
    road curvature as lateral acceleration at current speed / obs_curv_scale;
    nearest-agent distance bucket one-hot (< obs_near, < interaction_range,
    beyond or none); static boundary clearance bucket one-hot (< d_bound, >=).

    Thinking appends: CIPO-1 longitudinal distance / interaction_range and
    relative speed (agent minus ego) / obs_rel_speed_scale; merge flag and
    nearest merging agent distance / merge_longitudinal; motion-interaction
    agent arrival time at the crossing / horizon and ego distance to the
    crossing / interaction_range; exact boundary clearance along the expert
    path / obs_clearance_scale. Absent objects take the sentinels distance =
    max range, relative speed = 0, arrival time = horizon.
    With ``normalize=False`` the same slots hold the unscaled values.
    """
    cfg = scene.config
    ego = scene.ego

    def sc(value, scale):
        return value / scale if normalize else value

    base = np.zeros(F_BASE)
    base[0] = 1.0
    base[1] = sc(ego.speed, cfg.obs_speed_scale)
    base[2] = sc(ego.acceleration, cfg.obs_accel_scale)
    base[3 + [NavCommand.MOVE_FORWARD, NavCommand.TURN_LEFT, NavCommand.TURN_RIGHT].index(scene.command)] = 1.0
    base[6] = sc(road_curvature(scene) * ego.speed**2, cfg.obs_curv_scale)
    dists = [math.dist(a.position, ego.position) for a in scene.agents]
    nearest = min(dists, default=math.inf)
    bucket = 0 if nearest < cfg.obs_near else 1 if nearest < cfg.interaction_range else 2
    base[7 + bucket] = 1.0
    static_clear = scene.corridor.half_width - cfg.ego_width / 2
    base[10 if static_clear < cfg.d_bound else 11] = 1.0
    if mode is Mode.NON_THINKING:
        return base

    crit = scene.critical
    extra = np.zeros(len(THINK_FEATURES))
    rng_max, merge_max = cfg.interaction_range, cfg.merge_longitudinal
    extra[0], extra[1] = sc(rng_max, rng_max), 0.0
    extra[2], extra[3] = 0.0, sc(merge_max, merge_max)
    extra[4], extra[5] = sc(HORIZON, HORIZON), sc(rng_max, rng_max)
    s_ego = _ego_s(scene)
    line = scene.corridor.line
    if crit.cipo1 is not None:
        agent = scene.agent(crit.cipo1)
        gap, rel_v = _longitudinal_state(line, agent, s_ego, ego.speed)
        extra[0] = sc(gap, rng_max)
        extra[1] = sc(rel_v, cfg.obs_rel_speed_scale)
    if crit.cipo2:
        gaps = [_longitudinal_state(line, scene.agent(a), s_ego, ego.speed)[0] for a in crit.cipo2]
        extra[2] = 1.0
        extra[3] = sc(min(gaps, key=abs), merge_max)
    if crit.motion_interaction:
        path = nominal_path(scene)
        best = None
        for aid in crit.motion_interaction:
            t_e, t_a = crossing_times(scene, scene.agent(aid), path)
            if len(t_e):
                k = int(np.argmin(t_e))
                if best is None or t_e[k] < best[0]:
                    best = (float(t_e[k]), float(t_a[k]))
        if best is not None:
            extra[4] = sc(best[1], HORIZON)
            extra[5] = sc(best[0] * ego.speed, rng_max)
    extra[6] = sc(crit.boundary_distance, cfg.obs_clearance_scale)
    return np.concatenate([base, extra])


def _longitudinal_state(line: Polyline, agent: Agent, s_ego: float, v_ego: float):
    s_a, _, _ = line.project(np.array(agent.position))
    _, heading = line.pose_at(float(s_a))
    v_long = float(np.dot(agent.velocity, (math.cos(heading), math.sin(heading))))
    return float(s_a) - s_ego, v_long - v_ego


def feature_vectors(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(base, thinking, zero-padded non-thinking) feature vectors."""
    think = observe(scene, Mode.THINKING)
    base = think[:F_BASE].copy()
    padded = np.zeros(F_FULL)
    padded[:F_BASE] = base
    return base, think, padded


# ----------------------------------------------------------- serialization

def scene_to_record(scene: Scene, **extra) -> dict:
    rec = {
        "schema_version": SCHEMA_VERSION,
        "seed": int(scene.seed),
        "level": int(scene.complexity),
        "ego": {"x": scene.ego.position[0], "y": scene.ego.position[1], "heading": scene.ego.heading,
                "speed": scene.ego.speed, "acceleration": scene.ego.acceleration},
        "command": scene.command.value,
        "history": [{"t": f.t, "x": f.position[0], "y": f.position[1], "heading": f.heading,
                     "speed": f.speed} for f in scene.history.frames],
        "agents": [{"id": a.id, "length": a.length, "width": a.width, "x": a.position[0],
                    "y": a.position[1], "heading": a.heading, "vx": a.velocity[0], "vy": a.velocity[1],
                    "lane": a.lane_assignment.value, "track": a.future_track.tolist()}
                   for a in scene.agents],
        "corridor": {"half_width": scene.corridor.half_width,
                     "centerline": scene.corridor.centerline.tolist()},
    }
    rec.update(extra)
    return rec


def scene_from_record(rec: dict, config: WorldConfig = DEFAULT_WORLD, verify_level: bool = True) -> Scene:
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema version {rec.get('schema_version')!r}")
    e = rec["ego"]
    ego = EgoState((e["x"], e["y"]), e["heading"], e["speed"], e["acceleration"])
    history = History(tuple(HistoryFrame(h["t"], (h["x"], h["y"]), h["heading"], h["speed"])
                            for h in rec["history"]))
    agents = tuple(Agent(a["id"], a["length"], a["width"], (a["x"], a["y"]), a["heading"],
                         (a["vx"], a["vy"]), a["lane"], np.array(a["track"]))
                   for a in rec["agents"])
    c = rec["corridor"]
    corridor = LaneCorridor(np.array(c["centerline"]), c["half_width"])
    scene = Scene(ego, rec["command"], history, agents, corridor, int(rec["seed"]), config)
    if verify_level and "level" in rec and int(scene.complexity) != int(rec["level"]):
        raise ValueError(f"scene {rec['seed']}: stored level {rec['level']} != classified {int(scene.complexity)}")
    return scene


def write_scenes(path: Path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
            n += 1
    return n


def read_scene_records(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_world_config(path: Optional[Path]) -> WorldConfig:
    if path is None:
        return DEFAULT_WORLD
    from .config import load_toml
    data = load_toml(path)
    return WorldConfig.from_mapping(data.get("world", data))

