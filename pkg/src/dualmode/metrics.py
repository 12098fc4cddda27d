"""Closed-loop PDM-style trajectory metrics.

Every sub-metric is evaluated on a dense 0.1 s resampling of the planned
waypoints. The ``*_batch`` helpers score a stack of candidate trajectories
against one scene at once; the per-trajectory functions wrap them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .core import SIM_DT, WAYPOINT_DT, Trajectory, sweep, to_world
from .geometry import rect_corners, rects_overlap

if TYPE_CHECKING:
    from .world import Scene

TTC_HORIZON = 1.0
MAX_LON_ACCEL = 4.0
MAX_LAT_ACCEL = 4.0
MAX_JERK = 8.0
STATIONARY_SPEED = 0.1
MIN_EXPERT_PROGRESS = 0.5
CONTAINMENT_TOL = 1e-9

W_EP, W_TTC, W_COMFORT = 5.0, 5.0, 2.0


def aggregate(nc, dac, ttc, comfort, ep):
    """Multiplicative penalties times the weighted average of the soft terms."""
    return nc * dac * (W_EP * ep + W_TTC * ttc + W_COMFORT * comfort) / (W_EP + W_TTC + W_COMFORT)


@dataclass(frozen=True)
class PdmScore:
    nc: int
    dac: int
    ttc: int
    comfort: int
    ep: float
    pdms: float

    @classmethod
    def from_parts(cls, nc, dac, ttc, comfort, ep) -> "PdmScore":
        nc, dac, ttc, comfort = int(nc), int(dac), int(ttc), int(comfort)
        ep = float(ep)
        return cls(nc, dac, ttc, comfort, ep, float(aggregate(nc, dac, ttc, comfort, ep)))

    def as_dict(self) -> dict:
        return {"nc": self.nc, "dac": self.dac, "ttc": self.ttc, "comfort": self.comfort,
                "ep": self.ep, "pdms": self.pdms}


def _stack(trajs) -> np.ndarray:
    if isinstance(trajs, Trajectory):
        return trajs.waypoints[None]
    arr = np.asarray([t.waypoints if isinstance(t, Trajectory) else t for t in trajs], dtype=float)
    return arr.reshape(-1, 8, 2)


def _cfg(scene):
    return scene.config


def collision_batch(wp: np.ndarray, scene: "Scene") -> np.ndarray:
    """1 where no at-fault overlap occurs, per candidate (B,)."""
    cfg = _cfg(scene)
    pos, vel, head = sweep(wp, scene.ego)
    ok = np.ones(wp.shape[0], dtype=bool)
    speed = np.linalg.norm(vel, axis=-1)
    fwd = np.stack([np.cos(head), np.sin(head)], axis=-1)
    for agent in scene.agents:
        apos, _, ahead = agent.dense
        hit = rects_overlap(pos, head, cfg.ego_length, cfg.ego_width,
                            apos[:, None], ahead[:, None], agent.length, agent.width)
        behind = np.sum((apos[:, None] - pos) * fwd, axis=-1) < 0
        # judged at first contact: a stationary ego struck from behind is not at fault
        first = np.argmax(hit, axis=0)
        cols = np.arange(hit.shape[1])
        exempt = (speed[first, cols] < STATIONARY_SPEED) & behind[first, cols]
        ok &= ~(hit.any(axis=0) & ~exempt)
    return ok.astype(int)


def drivable_batch(wp: np.ndarray, scene: "Scene") -> np.ndarray:
    cfg = _cfg(scene)
    pos, _, head = sweep(wp, scene.ego)
    corners = rect_corners(pos, head, cfg.ego_length, cfg.ego_width)
    _, _, dist = scene.corridor.line.project(corners)
    inside = dist <= scene.corridor.half_width + CONTAINMENT_TOL
    return np.all(inside, axis=(0, 2)).astype(int)


def ttc_batch(wp: np.ndarray, scene: "Scene") -> np.ndarray:
    cfg = _cfg(scene)
    pos, vel, head = sweep(wp, scene.ego)
    n_tau = int(round(TTC_HORIZON / SIM_DT))
    taus = np.arange(n_tau + 1) * SIM_DT
    ok = np.ones(wp.shape[0], dtype=bool)
    ego_future = pos[:, None] + vel[:, None] * taus[None, :, None, None]  # (T, tau, B, 2)
    for agent in scene.agents:
        apos, avel, ahead = agent.dense
        a_future = apos[:, None] + avel[:, None] * taus[None, :, None]  # (T, tau, 2)
        hit = rects_overlap(ego_future, head[:, None], cfg.ego_length, cfg.ego_width,
                            a_future[:, :, None], ahead[:, None, None], agent.length, agent.width)
        ok &= ~np.any(hit, axis=(0, 1))
    return ok.astype(int)


def kinematics(wp: np.ndarray, scene: "Scene"):
    """Finite-difference longitudinal accel, lateral accel and longitudinal jerk.

    Velocities live at the half steps between waypoints (the ego pose anchors
    t=0); accelerations at the interior waypoints, preceded by the ego's
    current acceleration at t=0. Returns arrays of shape (B, 8), (B, 7), (B, 7).
    """
    b = wp.shape[0]
    pts = np.concatenate([np.zeros((b, 1, 2)), wp], axis=1)
    v_half = np.diff(pts, axis=1) / WAYPOINT_DT  # (B, 8, 2)
    acc = np.diff(v_half, axis=1) / WAYPOINT_DT  # (B, 7, 2), at t = 0.5 .. 3.5
    tangent = v_half[:, 1:] + v_half[:, :-1]
    norm = np.linalg.norm(tangent, axis=-1, keepdims=True)
    unit = np.where(norm > 1e-9, tangent / np.where(norm > 1e-9, norm, 1.0), 0.0)
    lon = np.sum(acc * unit, axis=-1)
    lat = unit[..., 0] * acc[..., 1] - unit[..., 1] * acc[..., 0]
    lon = np.concatenate([np.full((b, 1), scene.ego.acceleration), lon], axis=1)
    jerk = np.diff(lon, axis=1) / WAYPOINT_DT
    return lon, lat, jerk


def comfort_batch(wp: np.ndarray, scene: "Scene") -> np.ndarray:
    lon, lat, jerk = kinematics(wp, scene)
    ok = ((np.abs(lon) <= MAX_LON_ACCEL).all(axis=1)
          & (np.abs(lat) <= MAX_LAT_ACCEL).all(axis=1)
          & (np.abs(jerk) <= MAX_JERK).all(axis=1))
    return ok.astype(int)


def progress_batch(wp: np.ndarray, scene: "Scene") -> np.ndarray:
    """Arc-length progress of each final waypoint along the centerline."""
    line = scene.corridor.line
    s0, _, _ = line.project(np.asarray(scene.ego.position, dtype=float))
    end = to_world(wp[:, -1], scene.ego.position, scene.ego.heading)
    s1, _, _ = line.project(end)
    return s1 - float(s0)


def ego_progress_batch(wp: np.ndarray, scene: "Scene") -> np.ndarray:
    expert = float(progress_batch(scene.expert.waypoints[None], scene)[0])
    if expert < MIN_EXPERT_PROGRESS:
        return np.ones(wp.shape[0])
    return np.clip(progress_batch(wp, scene) / expert, 0.0, 1.0)


def score_batch(trajs, scene: "Scene") -> list[PdmScore]:
    wp = _stack(trajs)
    parts = zip(collision_batch(wp, scene), drivable_batch(wp, scene), ttc_batch(wp, scene),
                comfort_batch(wp, scene), ego_progress_batch(wp, scene))
    return [PdmScore.from_parts(*p) for p in parts]


def no_at_fault_collision(traj: Trajectory, scene: "Scene") -> int:
    return int(collision_batch(_stack(traj), scene)[0])


def drivable_area_compliance(traj: Trajectory, scene: "Scene") -> int:
    return int(drivable_batch(_stack(traj), scene)[0])


def time_to_collision(traj: Trajectory, scene: "Scene") -> int:
    return int(ttc_batch(_stack(traj), scene)[0])


def comfort(traj: Trajectory, scene: "Scene") -> int:
    return int(comfort_batch(_stack(traj), scene)[0])


def ego_progress(traj: Trajectory, scene: "Scene") -> float:
    return float(ego_progress_batch(_stack(traj), scene)[0])


def pdm_score(traj: Trajectory, scene: "Scene") -> PdmScore:
    return score_batch(traj, scene)[0]


def select_best_of_n(candidates: Sequence[Trajectory], scene: "Scene") -> tuple[int, PdmScore]:
    """Index and score of the best candidate; ties go to the lowest index."""
    if len(candidates) == 0:
        raise ValueError("empty candidate list")
    scores = score_batch(candidates, scene)
    best = int(np.argmax([s.pdms for s in scores]))
    return best, scores[best]
