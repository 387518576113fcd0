"""
Interaction and intensity metrics: time-to-collision, engagement,
maximum relative velocity, maximum acceleration and extrinsic reward reporting.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import EmptyBatch, InputError
from scenario import AgentState, Scenario, derive_kinematics

logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 2.0
DEFAULT_TTC_THRESHOLD = 4.0

CSV_COLUMNS = ["scenario_id", "min_ttc", "engaged", "max_rel_vel", "max_accel",
               "extrinsic_i", "extrinsic_j"]


@dataclass(frozen=True)
class MetricsReport:
    min_ttc: float
    engaged: bool
    max_relative_velocity: float
    max_acceleration: float
    extrinsic_reward_i: float
    extrinsic_reward_j: float
    scenario_id: str = ""

    def to_row(self) -> List[str]:
        min_ttc = "inf" if math.isinf(self.min_ttc) else f"{self.min_ttc:.6g}"
        return [self.scenario_id, min_ttc, str(int(self.engaged)),
                f"{self.max_relative_velocity:.6g}", f"{self.max_acceleration:.6g}",
                f"{self.extrinsic_reward_i:.6g}", f"{self.extrinsic_reward_j:.6g}"]


def ttc_arrays(dp: np.ndarray, dv: np.ndarray, radius: float) -> np.ndarray:
    """Constant-velocity disc TTC for arrays of relative positions/velocities (n, 2)"""
    dp = np.atleast_2d(np.asarray(dp, dtype=float))
    dv = np.atleast_2d(np.asarray(dv, dtype=float))
    a = np.einsum("ij,ij->i", dv, dv)
    b = 2.0 * np.einsum("ij,ij->i", dp, dv)
    c = np.einsum("ij,ij->i", dp, dp) - radius * radius
    disc = b * b - 4.0 * a * c
    out = np.full(a.shape, np.inf)
    moving = (a > 0) & (disc >= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        first = (-b - np.sqrt(np.where(moving, disc, 0.0))) / np.where(moving, 2.0 * a, 1.0)
    hit = moving & (first >= 0)
    out[hit] = first[hit]
    out[c <= 0] = 0.0
    return out


def ttc(state_i: AgentState, state_j: AgentState,
        r_i: float = DEFAULT_RADIUS, r_j: float = DEFAULT_RADIUS) -> float:
    """Smallest t >= 0 at which two constant-velocity discs touch, or +inf"""
    if r_i <= 0 or r_j <= 0:
        raise InputError("Collision radii must be positive")
    dp = np.subtract(state_j.position, state_i.position)
    dv = np.subtract(state_j.velocity, state_i.velocity)
    return float(ttc_arrays(dp[None, :], dv[None, :], r_i + r_j)[0])


def scenario_ttc_profile(scenario: Scenario, pair: Tuple[str, str],
                         radius: float = DEFAULT_RADIUS) -> np.ndarray:
    traj_i, traj_j = scenario.trajectory(pair[0]), scenario.trajectory(pair[1])
    dp = traj_j.positions - traj_i.positions
    dv = traj_j.velocities - traj_i.velocities
    return ttc_arrays(dp, dv, 2.0 * radius)


def min_ttc(scenario: Scenario, pair: Tuple[str, str], radius: float = DEFAULT_RADIUS) -> float:
    return float(np.min(scenario_ttc_profile(scenario, pair, radius)))


@dataclass(frozen=True)
class Collision:
    """First step at which two agent discs overlap"""
    agent_a: str
    agent_b: str
    step: int
    distance: float

    def to_dict(self) -> dict:
        return {"agents": [self.agent_a, self.agent_b], "step": self.step,
                "distance": round(self.distance, 6)}


def find_collisions(scenario: Scenario, radius: float = DEFAULT_RADIUS,
                    agents: Optional[Iterable[str]] = None) -> List[Collision]:
    """Pairs whose discs overlap at some step, in scenario order.

    With agents given, only pairs involving at least one of them are checked.
    """
    if radius <= 0:
        raise InputError("Collision radius must be positive")
    focus = None if agents is None else set(agents)
    trajectories = scenario.trajectories
    found = []
    for a, traj_a in enumerate(trajectories):
        for traj_b in trajectories[a + 1:]:
            if focus is not None and traj_a.agent_id not in focus and traj_b.agent_id not in focus:
                continue
            n = min(traj_a.n_steps, traj_b.n_steps)
            gaps = np.linalg.norm(traj_b.positions[:n] - traj_a.positions[:n], axis=1)
            hits = np.flatnonzero(gaps < 2.0 * radius)
            if hits.size:
                k = int(hits[0])
                found.append(Collision(traj_a.agent_id, traj_b.agent_id, k, float(gaps[k])))
    return found


def engagement(min_ttc_value: float, threshold: float = DEFAULT_TTC_THRESHOLD) -> bool:
    if threshold <= 0:
        raise InputError("TTC threshold must be positive")
    return bool(min_ttc_value < threshold)


def engagement_ratio(reports: Sequence[MetricsReport]) -> float:
    if not reports:
        raise EmptyBatch("Engagement ratio of an empty batch")
    engaged = sum(1 for report in reports if report.engaged)
    return 100.0 * engaged / len(reports)


def max_relative_velocity(scenario: Scenario, pair: Tuple[str, str]) -> float:
    traj_i, traj_j = scenario.trajectory(pair[0]), scenario.trajectory(pair[1])
    return float(np.max(np.linalg.norm(traj_j.velocities - traj_i.velocities, axis=1)))


def max_acceleration(scenario: Scenario) -> float:
    peak = 0.0
    for traj in scenario.trajectories:
        profile = derive_kinematics(traj)
        peak = max(peak, float(np.max(np.linalg.norm(profile.acceleration, axis=1))))
    return peak


def evaluate_scenario(scenario: Scenario, pair: Tuple[str, str],
                      extrinsic: Tuple[float, float] = (0.0, 0.0),
                      threshold: float = DEFAULT_TTC_THRESHOLD,
                      radius: float = DEFAULT_RADIUS, scenario_id: str = "") -> MetricsReport:
    lowest = min_ttc(scenario, pair, radius)
    return MetricsReport(
        min_ttc=lowest,
        engaged=engagement(lowest, threshold),
        max_relative_velocity=max_relative_velocity(scenario, pair),
        max_acceleration=max_acceleration(scenario),
        extrinsic_reward_i=float(extrinsic[0]),
        extrinsic_reward_j=float(extrinsic[1]),
        scenario_id=scenario_id,
    )


def write_metrics_csv(reports: Iterable[MetricsReport], path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for report in reports:
            writer.writerow(report.to_row())


def mean_or_nan(values: Sequence[float]) -> float:
    finite = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(finite)) if finite else float("nan")


def summary_line(reports: Sequence[MetricsReport], threshold: Optional[float] = None) -> str:
    ratio = engagement_ratio(reports)
    label = f"TTC < {threshold:g}s" if threshold is not None else "engaged"
    return f"{len(reports)} scenarios, engagement ratio ({label}): {ratio:.2f}%"
