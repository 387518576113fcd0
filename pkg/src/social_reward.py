"""
Social-aware rewards: intrinsic driving utility, the extrinsic reward registry
built from proposal intents, and their combination under (lambda, phi).

    R_i = lambda * (cos(phi) * R_intrinsic_self + sin(phi) * R_intrinsic_other) + R_extrinsic
"""

import logging
import math
from dataclasses import dataclass, fields
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import UnknownIntent, ValidationError
from metrics import DEFAULT_RADIUS, ttc_arrays
from proposer import Intent, IntentKind
from scenario import LaneMap, Scenario, Trajectory, derive_kinematics, project_onto_lane, project_points

logger = logging.getLogger(__name__)

ExtrinsicFn = Callable[[Trajectory, Scenario], float]

YIELD_GAP_MIN = 1.0
# Paths further apart than this never conflict
YIELD_CONFLICT_DISTANCE = 4.0


@dataclass(frozen=True)
class SocialParams:
    lam: float = 1.0
    phi: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if not math.isfinite(self.phi) or abs(self.phi) > math.pi / 2 + 1e-12:
            raise ValidationError(f"phi must lie in [-pi/2, pi/2], got {self.phi}")

    def to_dict(self) -> Dict[str, float]:
        return {"lambda": self.lam, "phi": self.phi}

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "SocialParams":
        return cls(float(data.get("lambda", 1.0)), float(data.get("phi", 0.0)))


RATIONAL_EGOIST = SocialParams(1.0, 0.0)


@dataclass(frozen=True)
class IntrinsicWeights:
    w_lane: float = 1.0
    w_speed: float = 1.0
    w_heading: float = 1.0
    w_comfort: float = 0.5
    w_safety: float = 2.0
    ttc_safe: float = 4.0
    accel_ref: float = 3.0
    jerk_ref: float = 5.0
    radius: float = DEFAULT_RADIUS

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"{f.name} must be finite and >= 0, got {value}")
        for name in ("ttc_safe", "accel_ref", "jerk_ref", "radius"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")

    @property
    def total_weight(self) -> float:
        return self.w_lane + self.w_speed + self.w_heading + self.w_comfort + self.w_safety

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "IntrinsicWeights":
        known = {f.name for f in fields(cls)}
        return cls(**{k: float(v) for k, v in data.items() if k in known})


@dataclass(frozen=True)
class RewardBreakdown:
    intrinsic_self: float
    intrinsic_other: float
    extrinsic: float
    total: float


def _clamp01(value: float) -> float:
    return float(min(max(value, 0.0), 1.0))


def intrinsic_components(traj: Trajectory, others: Sequence[Trajectory], lane_map: LaneMap,
                         w: IntrinsicWeights) -> Dict[str, float]:
    """Unweighted components, each in [-1, 0]"""
    components = {"lane": 0.0, "speed": 0.0, "heading": 0.0, "comfort": 0.0, "safety": 0.0}
    if lane_map.lanes:
        proj = project_points(traj.positions, lane_map)
        lanes = lane_map.lanes
        half_widths = np.array([lane.width / 2.0 for lane in lanes])[proj.lane_index]
        limits = np.array([lane.speed_limit for lane in lanes])[proj.lane_index]
        components["lane"] = -_clamp01(np.mean((proj.lateral_offset / half_widths) ** 2))
        components["speed"] = -_clamp01(np.mean(((traj.speeds - limits) / limits) ** 2))
        components["heading"] = -_clamp01(np.mean(1.0 - np.cos(traj.headings - proj.tangent_heading)))
    else:
        reference = max(float(traj.speeds[0]), 1.0)
        components["speed"] = -_clamp01(np.mean(((traj.speeds - reference) / reference) ** 2))

    kinematics = derive_kinematics(traj)
    accel = np.linalg.norm(kinematics.acceleration, axis=1)
    jerk = np.linalg.norm(kinematics.jerk, axis=1)
    components["comfort"] = -_clamp01(np.mean((accel / w.accel_ref) ** 2 + (jerk / w.jerk_ref) ** 2))

    if others:
        lowest = np.full(traj.n_steps, np.inf)
        for other in others:
            profile = ttc_arrays(other.positions - traj.positions,
                                 other.velocities - traj.velocities, 2.0 * w.radius)
            lowest = np.minimum(lowest, profile)
        shortfall = np.where(np.isinf(lowest), 0.0, np.maximum(0.0, (w.ttc_safe - lowest) / w.ttc_safe))
        components["safety"] = -_clamp01(np.mean(shortfall))
    return components


def intrinsic_reward(traj: Trajectory, others: Sequence[Trajectory], lane_map: LaneMap,
                     w: IntrinsicWeights) -> float:
    """Weight-normalized intrinsic reward; lies in [-1, 0]"""
    total_weight = w.total_weight
    if total_weight <= 0:
        return 0.0
    c = intrinsic_components(traj, others, lane_map, w)
    weighted = (w.w_lane * c["lane"] + w.w_speed * c["speed"] + w.w_heading * c["heading"]
                + w.w_comfort * c["comfort"] + w.w_safety * c["safety"])
    return float(weighted / total_weight)


# ---------------------------------------------------------------------------
# Extrinsic reward registry
# ---------------------------------------------------------------------------

def _lane_change_reward(intent: Intent) -> ExtrinsicFn:
    def reward(traj: Trajectory, scenario: Scenario) -> float:
        lane = scenario.map.lane(intent.target_lane_id)
        if lane is None:
            return 0.0
        window = max(1, int(round(1.0 / traj.dt)))
        offsets = project_onto_lane(traj.positions[-window:], lane).lateral_offset
        return 1.0 - _clamp01(abs(float(np.mean(offsets))) / (lane.width / 2.0))
    return reward


def _maintain_speed_reward(intent: Intent) -> ExtrinsicFn:
    target = float(intent.target_speed)

    def reward(traj: Trajectory, scenario: Scenario) -> float:
        return 1.0 - _clamp01(float(np.mean(np.abs(traj.speeds - target))) / max(target, 1.0))
    return reward


def _segment_intersections(a: np.ndarray, b: np.ndarray) -> Optional[Tuple[float, float]]:
    """First crossing of polyline a with polyline b, as fractional step indices (k_a, k_b)"""
    p, r = a[:-1], np.diff(a, axis=0)
    q, s = b[:-1], np.diff(b, axis=0)
    cross = lambda u, v: u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    denom = cross(r[:, None, :], s[None, :, :])
    qp = q[None, :, :] - p[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross(qp, s[None, :, :]) / denom
        u = cross(qp, r[:, None, :]) / denom
    hits = (np.abs(denom) > 1e-12) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    if not hits.any():
        return None
    ia, ib = np.argwhere(hits)[0]
    return float(ia + t[ia, ib]), float(ib + u[ia, ib])


def _conflict_times(own: Trajectory, other: Trajectory) -> Optional[Tuple[float, float]]:
    crossing = _segment_intersections(own.positions, other.positions)
    if crossing is None:
        gaps = np.linalg.norm(own.positions[:, None, :] - other.positions[None, :, :], axis=2)
        ka, kb = np.unravel_index(np.argmin(gaps), gaps.shape)
        if gaps[ka, kb] > YIELD_CONFLICT_DISTANCE:
            return None
        crossing = (float(ka), float(kb))
    return crossing[0] * own.dt, crossing[1] * other.dt


def _yield_reward(intent: Intent) -> ExtrinsicFn:
    def reward(traj: Trajectory, scenario: Scenario) -> float:
        try:
            other = scenario.trajectory(intent.yield_to)
        except KeyError:
            return 0.0
        times = _conflict_times(traj, other)
        if times is None:
            return 1.0
        gap = times[0] - times[1]
        return _clamp01(gap / YIELD_GAP_MIN)
    return reward


def _reach_point_reward(intent: Intent) -> ExtrinsicFn:
    goal = np.asarray(intent.goal, dtype=float)

    def reward(traj: Trajectory, scenario: Scenario) -> float:
        initial = float(np.linalg.norm(traj.positions[0] - goal))
        final = float(np.linalg.norm(traj.positions[-1] - goal))
        if initial < 1e-9:
            return 1.0 if final < 1e-9 else 0.0
        return 1.0 - _clamp01(final / initial)
    return reward


EXTRINSIC_REGISTRY: Dict[IntentKind, Callable[[Intent], ExtrinsicFn]] = {
    IntentKind.LANE_CHANGE_LEFT: _lane_change_reward,
    IntentKind.LANE_CHANGE_RIGHT: _lane_change_reward,
    IntentKind.MAINTAIN_SPEED: _maintain_speed_reward,
    IntentKind.YIELD: _yield_reward,
    IntentKind.REACH_POINT: _reach_point_reward,
}


def make_extrinsic(intent: Intent) -> ExtrinsicFn:
    builder = EXTRINSIC_REGISTRY.get(intent.kind)
    if builder is None:
        raise UnknownIntent(f"No extrinsic reward registered for intent {intent.kind!r}")
    return builder(intent)


# ---------------------------------------------------------------------------
# Social combination
# ---------------------------------------------------------------------------

def combine(params: SocialParams, intrinsic_self: float, intrinsic_other: float,
            extrinsic: float) -> RewardBreakdown:
    total = params.lam * (math.cos(params.phi) * intrinsic_self
                          + math.sin(params.phi) * intrinsic_other) + extrinsic
    return RewardBreakdown(intrinsic_self, intrinsic_other, extrinsic, total)


def social_reward(traj_i: Trajectory, traj_j: Trajectory, scenario: Scenario,
                  params_i: SocialParams, intent_i: Intent, w: IntrinsicWeights) -> RewardBreakdown:
    """Reward of agent i; the partner's extrinsic goal never enters"""
    own = intrinsic_reward(traj_i, [traj_j], scenario.map, w)
    # the partner is scored with the ego's own weights
    other = intrinsic_reward(traj_j, [traj_i], scenario.map, w)
    extrinsic = make_extrinsic(intent_i)(traj_i, scenario)
    return combine(params_i, own, other, extrinsic)


def _nearest(agent_id: str, candidates: Sequence[str], joint: Scenario) -> str:
    origin = joint.trajectory(agent_id).positions[0]
    return min(candidates, key=lambda c: (float(np.linalg.norm(joint.trajectory(c).positions[0] - origin)), c))


def joint_reward(joint: Scenario, pair: Tuple[str, str], params: Mapping[str, SocialParams],
                 intents: Mapping[str, Intent], w: IntrinsicWeights) -> float:
    """Sum of social rewards over every agent with an intent.

    Pair agents are scored against each other; any other agent with an intent
    is scored against the nearest pair agent.
    """
    total = 0.0
    for agent_id, intent in intents.items():
        if agent_id == pair[0]:
            partner = pair[1]
        elif agent_id == pair[1]:
            partner = pair[0]
        else:
            partner = _nearest(agent_id, pair, joint)
        breakdown = social_reward(joint.trajectory(agent_id), joint.trajectory(partner), joint,
                                  params.get(agent_id, RATIONAL_EGOIST), intent, w)
        total += breakdown.total
    return float(total)


def extrinsic_pair(scenario: Scenario, pair: Tuple[str, str],
                   intents: Mapping[str, Intent]) -> Tuple[float, float]:
    return tuple(
        float(make_extrinsic(intents[agent_id])(scenario.trajectory(agent_id), scenario))
        for agent_id in pair
    )
