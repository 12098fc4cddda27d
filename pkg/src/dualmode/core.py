"""Small types shared by every layer: reasoning mode and the timed trajectory."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .geometry import headings_from_velocity, hermite_densify, rotate

N_WAYPOINTS = 8
WAYPOINT_DT = 0.5
HORIZON = N_WAYPOINTS * WAYPOINT_DT
SIM_DT = 0.1
SUBSTEPS = int(round(WAYPOINT_DT / SIM_DT))
MAX_COORD = 200.0


class Mode(IntEnum):
    """Reasoning mode. The integer value is the row index in the mode head."""

    THINKING = 0
    NON_THINKING = 1

    @property
    def label(self) -> str:
        return "Thinking" if self is Mode.THINKING else "NonThinking"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        key = text.replace("-", "").replace("_", "").lower()
        if key in ("thinking", "think"):
            return cls.THINKING
        if key in ("nonthinking", "nothink", "nonthink"):
            return cls.NON_THINKING
        raise ValueError(f"unknown mode {text!r}")


class InvalidTrajectory(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Eight (x, y) waypoints in the ego frame at t=0, spaced 0.5 s apart."""

    waypoints: np.ndarray

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=float)
        if wp.shape != (N_WAYPOINTS, 2):
            raise InvalidTrajectory(f"expected {N_WAYPOINTS} waypoints, got shape {wp.shape}")
        if not np.all(np.isfinite(wp)):
            raise InvalidTrajectory("non-finite waypoint")
        if np.any(np.abs(wp) > MAX_COORD):
            raise InvalidTrajectory(f"waypoint beyond {MAX_COORD} m")
        wp.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)

    @property
    def dt(self) -> float:
        return WAYPOINT_DT

    @property
    def endpoint(self) -> np.ndarray:
        return self.waypoints[-1]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return np.array_equal(self.waypoints, other.waypoints)

    def __hash__(self):
        return hash(self.waypoints.tobytes())

    def __repr__(self):
        return f"Trajectory(endpoint=({self.endpoint[0]:.2f}, {self.endpoint[1]:.2f}))"


def to_world(waypoints: np.ndarray, position, heading) -> np.ndarray:
    """Map ego-frame waypoints (..., 2) to the world frame."""
    return rotate(np.asarray(waypoints, dtype=float), heading) + np.asarray(position, dtype=float)


def sweep(waypoints: np.ndarray, ego) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense 0.1 s world-frame sweep of one or more ego-frame trajectories.

    ``waypoints`` is (8, 2) or (B, 8, 2). Returns positions and velocities of
    shape (41, [B,] 2) and headings (41, [B]) with the ego pose prepended at t=0.
    """
    wp = np.asarray(waypoints, dtype=float)
    batched = wp.ndim == 3
    if not batched:
        wp = wp[None]
    world = to_world(wp, ego.position, ego.heading)
    start = np.broadcast_to(np.asarray(ego.position, dtype=float), (wp.shape[0], 2))
    pts = np.concatenate([start[:, None], world], axis=1).transpose(1, 0, 2)
    v0 = ego.speed * np.array([np.cos(ego.heading), np.sin(ego.heading)])
    pos, vel = hermite_densify(pts, v0, WAYPOINT_DT, SUBSTEPS)
    head = headings_from_velocity(vel, ego.heading)
    if not batched:
        return pos[:, 0], vel[:, 0], head[:, 0]
    return pos, vel, head
