"""
Bundled synthetic scenarios: constant-velocity agents on simple lane layouts.
"""

import math
from typing import Callable, Dict, List, Tuple

import numpy as np

from errors import InputError
from scenario import DEFAULT_DT, Lane, LaneMap, Scenario, Trajectory

FIXTURE_STEPS = 60
LANE_WIDTH = 3.5


def constant_velocity(agent_id: str, start: Tuple[float, float], speed: float, heading: float,
                      n_steps: int = FIXTURE_STEPS, dt: float = DEFAULT_DT) -> Trajectory:
    times = np.arange(n_steps) * dt
    direction = np.array([math.cos(heading), math.sin(heading)])
    positions = np.asarray(start, dtype=float) + times[:, None] * speed * direction
    return Trajectory(agent_id, positions, np.full(n_steps, float(speed)), np.full(n_steps, heading), dt)


def straight_lane(lane_id: str, start: Tuple[float, float], end: Tuple[float, float],
                  speed_limit: float = 15.0) -> Lane:
    return Lane(lane_id, np.array([start, end], dtype=float), LANE_WIDTH, speed_limit)


def straight() -> Scenario:
    """Two agents in one lane, the follower closing on the leader"""
    lanes = (straight_lane("L0", (-20.0, 0.0), (200.0, 0.0)),)
    agents = (constant_velocity("a", (0.0, 0.0), 12.0, 0.0),
              constant_velocity("b", (25.0, 0.0), 8.0, 0.0))
    return Scenario(agents, LaneMap(lanes), {"name": "straight"})


def merge() -> Scenario:
    """A faster agent in the left lane converging on a slower one in the right lane"""
    lanes = (straight_lane("L0", (-20.0, 0.0), (200.0, 0.0)),
             straight_lane("L1", (-20.0, LANE_WIDTH), (200.0, LANE_WIDTH)))
    agents = (constant_velocity("i", (0.0, LANE_WIDTH), 14.0, 0.0),
              constant_velocity("j", (10.0, 0.0), 10.0, 0.0),
              constant_velocity("k", (60.0, 0.0), 10.0, 0.0))
    return Scenario(agents, LaneMap(lanes), {"name": "merge"})


def crossing() -> Scenario:
    """Perpendicular approaches to an unsignalized intersection"""
    lanes = (straight_lane("EW", (-60.0, 0.0), (60.0, 0.0), 12.0),
             straight_lane("NS", (0.0, -60.0), (0.0, 60.0), 12.0))
    agents = (constant_velocity("a", (-30.0, 0.0), 10.0, 0.0),
              constant_velocity("b", (0.0, -25.0), 9.0, math.pi / 2))
    return Scenario(agents, LaneMap(lanes), {"name": "crossing"})


def headon() -> Scenario:
    """Opposing traffic on a two-lane road"""
    half = LANE_WIDTH / 2.0
    lanes = (straight_lane("E", (-100.0, -half), (100.0, -half)),
             straight_lane("W", (100.0, half), (-100.0, half)))
    agents = (constant_velocity("a", (-40.0, -half), 10.0, 0.0),
              constant_velocity("b", (40.0, half), 10.0, math.pi))
    return Scenario(agents, LaneMap(lanes), {"name": "headon"})


FIXTURES: Dict[str, Callable[[], Scenario]] = {
    "straight": straight,
    "merge": merge,
    "crossing": crossing,
    "headon": headon,
}


def fixture_names() -> List[str]:
    return list(FIXTURES)


def build_fixture(name: str) -> Scenario:
    if name not in FIXTURES:
        raise InputError(f"Unknown fixture {name!r}; available: {', '.join(FIXTURES)}")
    return FIXTURES[name]()
