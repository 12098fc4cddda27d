from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dualmode.core import N_WAYPOINTS, WAYPOINT_DT
from dualmode.world import (Agent, ComplexityLevel, EgoState, History, HistoryFrame, LaneCorridor, Scene,
                            build_centerline, generate_scene)

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

T = np.arange(N_WAYPOINTS + 1) * WAYPOINT_DT


def history_for(speed: float) -> History:
    return History(tuple(HistoryFrame(t, (speed * t, 0.0), 0.0, speed) for t in (-1.5, -1.0, -0.5)))


def agent_cv(agent_id, x, y, vx=0.0, vy=0.0, length=4.5, width=1.9, lane="EgoLane", heading=None):
    """Constant-velocity agent."""
    track = np.stack([x + vx * T, y + vy * T], axis=1)
    if heading is None:
        heading = float(np.arctan2(vy, vx)) if (vx or vy) else 0.0
    return Agent(agent_id, length, width, (x, y), heading, (vx, vy), lane, track)


def agent_track(agent_id, track, velocity, length=4.5, width=1.9, lane="EgoLane", heading=0.0):
    track = np.asarray(track, dtype=float)
    return Agent(agent_id, length, width, tuple(track[0]), heading, velocity, lane, track)


def straight_scene(agents=(), speed=10.0, half_width=3.0, accel=0.0, command="MoveForward", seed=0,
                   curvature=0.0):
    corridor = LaneCorridor(build_centerline(curvature), half_width)
    return Scene(EgoState((0.0, 0.0), 0.0, speed, accel), command, history_for(speed), tuple(agents),
                 corridor, seed)


@pytest.fixture(scope="session")
def level_scenes():
    """A handful of generated scenes per level, shared across test modules."""
    return {lvl: [generate_scene(100 + i, ComplexityLevel(lvl)) for i in range(8)] for lvl in (1, 2, 3)}


@pytest.fixture(scope="session")
def mixed_scenes(level_scenes):
    return [s for lvl in (1, 2, 3) for s in level_scenes[lvl]]
