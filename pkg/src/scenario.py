"""
Scenario data model: lane maps, agent states and trajectories.
Handles the scenario JSON format, validation, derived kinematics and
projection of points onto lane centerlines.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.1
# Allowed excess of step distance over max(speed_k, speed_k+1) * dt, in m/s
CONSISTENCY_SLACK = 2.0


def normalize_angle(angle):
    """Wrap angles into (-pi, pi]; exactly pi stays +pi"""
    wrapped = np.mod(np.asarray(angle, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    wrapped = np.where(wrapped <= -math.pi, math.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class AgentState:
    position: Tuple[float, float]
    speed: float
    heading: float

    @property
    def velocity(self) -> Tuple[float, float]:
        return (self.speed * math.cos(self.heading), self.speed * math.sin(self.heading))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Per-agent state sequence stored column-wise (positions, speeds, headings)"""

    agent_id: str
    positions: np.ndarray
    speeds: np.ndarray
    headings: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float).reshape(-1, 2)
        speeds = np.array(self.speeds, dtype=float).reshape(-1)
        headings = normalize_angle(np.array(self.headings, dtype=float).reshape(-1))
        headings = np.atleast_1d(np.asarray(headings, dtype=float))
        for arr in (positions, speeds, headings):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "speeds", speeds)
        object.__setattr__(self, "headings", headings)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_steps(self) -> int:
        return int(self.positions.shape[0])

    @property
    def states(self) -> Tuple[AgentState, ...]:
        return tuple(
            AgentState((float(p[0]), float(p[1])), float(v), float(h))
            for p, v, h in zip(self.positions, self.speeds, self.headings)
        )

    def state(self, k: int) -> AgentState:
        p = self.positions[k]
        return AgentState((float(p[0]), float(p[1])), float(self.speeds[k]), float(self.headings[k]))

    @property
    def velocities(self) -> np.ndarray:
        """Velocity vectors speed * (cos, sin) of heading, shape (T_s, 2)"""
        return self.speeds[:, None] * np.stack([np.cos(self.headings), np.sin(self.headings)], axis=1)


@dataclass(frozen=True, eq=False)
class Lane:
    id: str
    centerline: np.ndarray
    width: float
    speed_limit: float
    successors: Tuple[str, ...] = ()

    def __post_init__(self):
        centerline = np.array(self.centerline, dtype=float).reshape(-1, 2)
        centerline.setflags(write=False)
        object.__setattr__(self, "centerline", centerline)
        object.__setattr__(self, "successors", tuple(self.successors))

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.centerline, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())

    def point_at(self, arc_length: float) -> np.ndarray:
        """Point on the centerline at the given arc length, extrapolated past the ends"""
        lengths = self.segment_lengths
        cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
        seg = int(np.clip(np.searchsorted(cumulative, arc_length, side="right") - 1, 0, len(lengths) - 1))
        start, end = self.centerline[seg], self.centerline[seg + 1]
        direction = (end - start) / max(lengths[seg], 1e-12)
        return start + direction * (arc_length - cumulative[seg])


@dataclass(frozen=True)
class LaneMap:
    lanes: Tuple[Lane, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))

    def lane(self, lane_id: str) -> Optional[Lane]:
        for lane in self.lanes:
            if lane.id == lane_id:
                return lane
        return None

    @property
    def lane_ids(self) -> List[str]:
        return [lane.id for lane in self.lanes]


@dataclass(frozen=True)
class Scenario:
    trajectories: Tuple[Trajectory, ...]
    map: LaneMap
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))

    @property
    def agent_ids(self) -> List[str]:
        return [traj.agent_id for traj in self.trajectories]

    @property
    def dt(self) -> float:
        return self.trajectories[0].dt if self.trajectories else DEFAULT_DT

    @property
    def n_steps(self) -> int:
        return self.trajectories[0].n_steps if self.trajectories else 0

    def trajectory(self, agent_id: str) -> Trajectory:
        for traj in self.trajectories:
            if traj.agent_id == agent_id:
                return traj
        raise KeyError(agent_id)

    def with_trajectories(self, trajectories: Sequence[Trajectory],
                          metadata: Optional[Dict[str, Any]] = None) -> "Scenario":
        return replace(self, trajectories=tuple(trajectories),
                       metadata=dict(self.metadata if metadata is None else metadata))


@dataclass(frozen=True)
class KinematicProfile:
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray


@dataclass(frozen=True)
class LaneProjection:
    lane_id: str
    lateral_offset: float
    tangent_heading: float
    arc_length: float


@dataclass(frozen=True)
class PointProjections:
    """Vectorized projection of many points; lane_index refers to LaneMap.lanes"""

    lane_index: np.ndarray
    lateral_offset: np.ndarray
    tangent_heading: np.ndarray
    arc_length: np.ndarray


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_trajectory(traj: Trajectory):
    if traj.n_steps < 2:
        raise ValidationError("Trajectory needs at least 2 states", traj.agent_id)
    if not traj.dt > 0 or not math.isfinite(traj.dt):
        raise ValidationError(f"dt must be positive, got {traj.dt}", traj.agent_id)
    for k in range(traj.n_steps):
        values = (traj.positions[k, 0], traj.positions[k, 1], traj.speeds[k], traj.headings[k])
        if not all(math.isfinite(v) for v in values):
            raise ValidationError("Non-finite state", traj.agent_id, k)
        if traj.speeds[k] < 0:
            raise ValidationError(f"Negative speed {traj.speeds[k]}", traj.agent_id, k)
    steps = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)
    bound = (np.maximum(traj.speeds[:-1], traj.speeds[1:]) + CONSISTENCY_SLACK) * traj.dt
    violations = np.nonzero(steps > bound + 1e-9)[0]
    if violations.size:
        k = int(violations[0])
        raise ValidationError(
            f"Step of {steps[k]:.3f} m exceeds consistency bound {bound[k]:.3f} m",
            traj.agent_id, k + 1)


def validate_lane_map(lane_map: LaneMap):
    ids = lane_map.lane_ids
    if len(set(ids)) != len(ids):
        raise ValidationError("Duplicate lane id in map")
    for lane in lane_map.lanes:
        if lane.centerline.shape[0] < 2:
            raise ValidationError(f"Lane {lane.id} centerline needs at least 2 points")
        if not np.all(np.isfinite(lane.centerline)):
            raise ValidationError(f"Lane {lane.id} centerline is not finite")
        if not lane.width > 0:
            raise ValidationError(f"Lane {lane.id} width must be positive")
        if not lane.speed_limit > 0:
            raise ValidationError(f"Lane {lane.id} speed limit must be positive")
        for successor in lane.successors:
            if successor not in ids:
                raise ValidationError(f"Lane {lane.id} successor {successor} does not resolve")


def validate_scenario(scenario: Scenario):
    """Raise ValidationError on the first violated invariant"""
    ids = scenario.agent_ids
    seen = set()
    for agent_id in ids:
        if agent_id in seen:
            raise ValidationError("Duplicate agent id", agent_id)
        seen.add(agent_id)
    for traj in scenario.trajectories:
        validate_trajectory(traj)
        if traj.n_steps != scenario.n_steps:
            raise ValidationError(
                f"Trajectory length {traj.n_steps} differs from {scenario.n_steps}", traj.agent_id)
        if abs(traj.dt - scenario.dt) > 1e-12:
            raise ValidationError(f"dt {traj.dt} differs from {scenario.dt}", traj.agent_id)
    validate_lane_map(scenario.map)


# ---------------------------------------------------------------------------
# JSON format
# ---------------------------------------------------------------------------

def _round9(value: float) -> float:
    return float(f"{value:.9g}")


def scenario_to_dict(scenario: Scenario) -> Dict[str, Any]:
    """Convert a Scenario to the JSON schema, floats at 9 significant digits"""
    return {
        "dt": _round9(scenario.dt),
        "agents": [
            {
                "id": traj.agent_id,
                "states": [
                    [_round9(p[0]), _round9(p[1]), _round9(v), _round9(h)]
                    for p, v, h in zip(traj.positions, traj.speeds, traj.headings)
                ],
            }
            for traj in scenario.trajectories
        ],
        "map": {
            "lanes": [
                {
                    "id": lane.id,
                    "centerline": [[_round9(x), _round9(y)] for x, y in lane.centerline],
                    "width": _round9(lane.width),
                    "speed_limit": _round9(lane.speed_limit),
                    "successors": list(lane.successors),
                }
                for lane in scenario.map.lanes
            ]
        },
        "metadata": scenario.metadata,
    }


def _require(data: Dict[str, Any], key: str, kind, where: str):
    if not isinstance(data, dict) or key not in data:
        raise ParseError(f"Missing field '{key}' in {where}")
    value = data[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ParseError(f"Field '{key}' in {where} has wrong type {type(value).__name__}")
    return value


def scenario_from_dict(data: Dict[str, Any]) -> Scenario:
    """Build a Scenario from parsed JSON; checks schema shape only"""
    if not isinstance(data, dict):
        raise ParseError("Scenario root must be a JSON object")
    dt = float(_require(data, "dt", (int, float), "scenario"))
    trajectories = []
    for index, agent in enumerate(_require(data, "agents", list, "scenario")):
        where = f"agents[{index}]"
        agent_id = _require(agent, "id", str, where)
        states = _require(agent, "states", list, where)
        rows = []
        for k, row in enumerate(states):
            if not isinstance(row, list) or len(row) != 4 or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in row):
                raise ParseError(f"{where}.states[{k}] must be [x, y, speed, heading]")
            rows.append(row)
        arr = np.array(rows, dtype=float).reshape(-1, 4)
        trajectories.append(Trajectory(agent_id, arr[:, :2], arr[:, 2], arr[:, 3], dt))
    lanes = []
    map_data = _require(data, "map", dict, "scenario")
    for index, lane in enumerate(_require(map_data, "lanes", list, "map")):
        where = f"map.lanes[{index}]"
        centerline = _require(lane, "centerline", list, where)
        try:
            points = np.array(centerline, dtype=float).reshape(-1, 2)
        except (TypeError, ValueError) as e:
            raise ParseError(f"{where}.centerline must be a list of [x, y]: {e}")
        lanes.append(Lane(
            id=_require(lane, "id", str, where),
            centerline=points,
            width=float(_require(lane, "width", (int, float), where)),
            speed_limit=float(_require(lane, "speed_limit", (int, float), where)),
            successors=tuple(lane.get("successors", [])),
        ))
    metadata = data.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ParseError("Field 'metadata' must be an object")
    return Scenario(tuple(trajectories), LaneMap(tuple(lanes)), metadata)


def load_scenario(path: str) -> Scenario:
    """Load and validate a scenario JSON file"""
    if not os.path.exists(path):
        raise ParseError(f"Scenario file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"Malformed scenario JSON in {path}: {e}")
    except OSError as e:
        raise ParseError(f"Cannot read scenario file {path}: {e}")
    scenario = scenario_from_dict(data)
    validate_scenario(scenario)
    logger.debug("Loaded %s: %d agents, %d steps", path, len(scenario.trajectories), scenario.n_steps)
    return scenario


def save_scenario(scenario: Scenario, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scenario_to_dict(scenario), f, indent=2, ensure_ascii=False)


# ---------------------------------------------------------------------------
# Kinematics and lane geometry
# ---------------------------------------------------------------------------

def _difference(values: np.ndarray, dt: float) -> np.ndarray:
    # central in the interior, one-sided at both ends
    return np.gradient(values, dt, axis=0, edge_order=1)


def derive_kinematics(traj: Trajectory) -> KinematicProfile:
    velocity = _difference(traj.positions, traj.dt)
    acceleration = _difference(velocity, traj.dt)
    jerk = _difference(acceleration, traj.dt)
    return KinematicProfile(velocity, acceleration, jerk)


def _project_onto_polyline(points: np.ndarray, centerline: np.ndarray):
    """Distance, signed lateral offset, tangent heading and arc length per point"""
    starts = centerline[:-1]
    deltas = centerline[1:] - starts
    seg_len2 = np.maximum(np.einsum("ij,ij->i", deltas, deltas), 1e-18)
    rel = points[:, None, :] - starts[None, :, :]
    t = np.clip(np.einsum("nsj,sj->ns", rel, deltas) / seg_len2, 0.0, 1.0)
    offset = rel - t[:, :, None] * deltas[None, :, :]
    dist = np.linalg.norm(offset, axis=2)
    seg = np.argmin(dist, axis=1)
    rows = np.arange(points.shape[0])
    d = deltas[seg]
    r = rel[rows, seg]
    cross = d[:, 0] * r[:, 1] - d[:, 1] * r[:, 0]
    best = dist[rows, seg]
    lateral = np.where(cross < 0, -best, best)
    heading = np.arctan2(d[:, 1], d[:, 0])
    cumulative = np.concatenate([[0.0], np.cumsum(np.sqrt(seg_len2))])
    arc = cumulative[seg] + t[rows, seg] * np.sqrt(seg_len2[seg])
    return best, lateral, heading, arc


def project_onto_lane(points: np.ndarray, lane: Lane) -> PointProjections:
    """Project points onto one specific lane"""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    _, lateral, heading, arc = _project_onto_polyline(pts, lane.centerline)
    return PointProjections(np.zeros(len(pts), dtype=int), lateral, heading, arc)


def project_points(points: np.ndarray, lane_map: LaneMap) -> PointProjections:
    """Nearest-lane projection for many points; ties go to the lowest lane id"""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    order = sorted(range(len(lane_map.lanes)), key=lambda i: lane_map.lanes[i].id)
    results = [_project_onto_polyline(pts, lane_map.lanes[i].centerline) for i in order]
    distances = np.stack([r[0] for r in results], axis=1)
    choice = np.argmin(distances, axis=1)
    rows = np.arange(len(pts))
    pick = lambda j: np.stack([r[j] for r in results], axis=1)[rows, choice]
    lane_index = np.array(order, dtype=int)[choice]
    return PointProjections(lane_index, pick(1), pick(2), pick(3))


def project_to_lane(point, lane_map: LaneMap) -> LaneProjection:
    projections = project_points(np.asarray(point, dtype=float).reshape(1, 2), lane_map)
    return LaneProjection(
        lane_id=lane_map.lanes[int(projections.lane_index[0])].id,
        lateral_offset=float(projections.lateral_offset[0]),
        tangent_heading=float(projections.tangent_heading[0]),
        arc_length=float(projections.arc_length[0]),
    )


def trajectory_from_positions(agent_id: str, positions: np.ndarray, dt: float,
                              fallback_heading: float = 0.0) -> Trajectory:
    """Rebuild speed and heading from positions alone.

    Speed at step k is the larger of the adjacent step distances over dt, so
    the consistency bound holds by construction. Heading follows the central
    difference velocity and is carried forward while the agent is stationary.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1) / dt
    forward = np.concatenate([steps, steps[-1:]])
    backward = np.concatenate([steps[:1], steps])
    speeds = np.maximum(forward, backward)
    velocity = _difference(positions, dt)
    headings = np.empty(len(positions))
    last = fallback_heading
    for k, (vx, vy) in enumerate(velocity):
        if math.hypot(vx, vy) > 1e-6:
            last = math.atan2(vy, vx)
        headings[k] = last
    return Trajectory(agent_id, positions, speeds, headings, dt)
