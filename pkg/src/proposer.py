"""
Two-stage interaction proposer.
Stage 1 describes the scene (structured features plus rendered text);
Stage 2 selects the vehicle pair with the highest interaction potential and
emits structured intents, from a rule table, a seeded random baseline or a
chat service.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import (GatewayError, InputError, InsufficientAgents, NoJsonFound,
                    ProposalReferenceError, SchemaError, SelfPairError)
from llm_gateway import ChatGateway, ChatMessage, GatewayConfig
from metrics import DEFAULT_RADIUS, ttc
from scenario import Scenario, normalize_angle, project_onto_lane, project_to_lane

logger = logging.getLogger(__name__)

PROMPTS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "prompts")
DEFAULT_HORIZON = 5.0
DEFAULT_POTENTIAL_WEIGHTS = (1.0, 0.5, 0.05)
# Distance past a conflict point or a leader used for ReachPoint goals
GOAL_MARGIN = 10.0


class IntentKind(Enum):
    LANE_CHANGE_LEFT = "LaneChangeLeft"
    LANE_CHANGE_RIGHT = "LaneChangeRight"
    MAINTAIN_SPEED = "MaintainSpeed"
    YIELD = "Yield"
    REACH_POINT = "ReachPoint"


class ProposerBackend(Enum):
    HEURISTIC = "heuristic"
    SERVICE = "service"
    RANDOM = "random"


@dataclass(frozen=True)
class Intent:
    kind: IntentKind
    target_lane_id: Optional[str] = None
    target_speed: Optional[float] = None
    yield_to: Optional[str] = None
    goal: Optional[Tuple[float, float]] = None

    @property
    def is_lane_change(self) -> bool:
        return self.kind in (IntentKind.LANE_CHANGE_LEFT, IntentKind.LANE_CHANGE_RIGHT)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind.value}
        if self.is_lane_change:
            data["target_lane_id"] = self.target_lane_id
        elif self.kind == IntentKind.MAINTAIN_SPEED:
            data["target_speed"] = self.target_speed
        elif self.kind == IntentKind.YIELD:
            data["yield_to"] = self.yield_to
        else:
            data["goal"] = [self.goal[0], self.goal[1]]
        return data

    @classmethod
    def from_dict(cls, data: Any) -> "Intent":
        if not isinstance(data, dict):
            raise SchemaError("Intent must be a JSON object", fragment=json.dumps(data))
        try:
            kind = IntentKind(data.get("kind"))
        except ValueError:
            raise SchemaError(f"Unknown intent kind {data.get('kind')!r}", fragment=json.dumps(data))

        def param(name, types):
            value = data.get(name)
            if value is None or isinstance(value, bool) or not isinstance(value, types):
                raise SchemaError(f"{kind.value} intent needs '{name}'", fragment=json.dumps(data))
            return value

        if kind in (IntentKind.LANE_CHANGE_LEFT, IntentKind.LANE_CHANGE_RIGHT):
            return cls(kind, target_lane_id=param("target_lane_id", str))
        if kind == IntentKind.MAINTAIN_SPEED:
            speed = float(param("target_speed", (int, float)))
            if speed < 0 or not math.isfinite(speed):
                raise SchemaError("target_speed must be finite and >= 0", fragment=json.dumps(data))
            return cls(kind, target_speed=speed)
        if kind == IntentKind.YIELD:
            return cls(kind, yield_to=param("yield_to", str))
        goal = param("goal", list)
        if len(goal) != 2 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in goal):
            raise SchemaError("ReachPoint goal must be [x, y]", fragment=json.dumps(data))
        return cls(kind, goal=(float(goal[0]), float(goal[1])))

    def check_references(self, scenario: Scenario):
        if self.is_lane_change and scenario.map.lane(self.target_lane_id) is None:
            raise ProposalReferenceError(f"Unknown lane id {self.target_lane_id!r}",
                                         fragment=self.target_lane_id)
        if self.kind == IntentKind.YIELD and self.yield_to not in scenario.agent_ids:
            raise ProposalReferenceError(f"Unknown agent id {self.yield_to!r}", fragment=self.yield_to)


def maintain(speed: float) -> Intent:
    return Intent(IntentKind.MAINTAIN_SPEED, target_speed=float(speed))


@dataclass(frozen=True)
class Proposal:
    agent_i: str
    agent_j: str
    intent_i: Intent
    intent_j: Intent
    rationale: str = ""
    # provenance only; two proposals with the same content are equal
    backend: str = field(default="heuristic", compare=False)

    @property
    def pair(self) -> Tuple[str, str]:
        return (self.agent_i, self.agent_j)

    @property
    def intents(self) -> Dict[str, Intent]:
        return {self.agent_i: self.intent_i, self.agent_j: self.intent_j}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "agent_i": self.agent_i,
            "agent_j": self.agent_j,
            "intent_i": self.intent_i.to_dict(),
            "intent_j": self.intent_j.to_dict(),
            "rationale": self.rationale,
            "backend": self.backend,
        }


def render_proposal(proposal: Proposal) -> str:
    """Canonical JSON serialization of a proposal"""
    return json.dumps(proposal.to_dict(), sort_keys=True, ensure_ascii=False)


@dataclass(frozen=True)
class AgentSummary:
    agent_id: str
    lane_id: Optional[str]
    position: Tuple[float, float]
    speed: float
    heading: float
    mean_speed: float
    heading_error: float


@dataclass(frozen=True)
class PairFeatures:
    agent_i: str
    agent_j: str
    distance: float
    relative_speed: float
    closing_speed: float
    min_distance: float
    time_of_min_distance: float
    path_crossing: bool
    min_ttc: float


@dataclass(frozen=True)
class SceneDescription:
    agents: Tuple[AgentSummary, ...]
    pairs: Tuple[PairFeatures, ...]
    horizon: float
    rendered_text: str

    def agent(self, agent_id: str) -> AgentSummary:
        for summary in self.agents:
            if summary.agent_id == agent_id:
                return summary
        raise KeyError(agent_id)

    def pair(self, a: str, b: str) -> PairFeatures:
        for features in self.pairs:
            if {features.agent_i, features.agent_j} == {a, b}:
                return features
        raise KeyError((a, b))


@dataclass
class ProposerConfig:
    horizon: float = DEFAULT_HORIZON
    weights: Tuple[float, float, float] = DEFAULT_POTENTIAL_WEIGHTS
    retries: int = 2
    single_stage: bool = False
    seed: int = 0
    radius: float = DEFAULT_RADIUS
    prompts_dir: str = PROMPTS_DIR
    gateway: Optional[GatewayConfig] = None


# ---------------------------------------------------------------------------
# Stage 1: scene description
# ---------------------------------------------------------------------------

def _segments_cross(p1, p2, q1, q2, eps: float = 1e-9) -> bool:
    """Proper crossing of two segments.

    Each segment must have the other's endpoints strictly on opposite sides.
    Parallel and collinear segments never cross, so agents following each
    other along one lane are not flagged.
    """
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (((d1 > eps and d2 < -eps) or (d1 < -eps and d2 > eps))
            and ((d3 > eps and d4 < -eps) or (d3 < -eps and d4 > eps)))


def _line_intersection(p, r, q, s) -> Optional[np.ndarray]:
    denom = r[0] * s[1] - r[1] * s[0]
    if abs(denom) < 1e-12:
        return None
    qp = q - p
    t = (qp[0] * s[1] - qp[1] * s[0]) / denom
    return p + t * r


def _pair_features(scenario: Scenario, a: str, b: str, horizon: float, radius: float) -> PairFeatures:
    si, sj = scenario.trajectory(a).state(0), scenario.trajectory(b).state(0)
    pi, pj = np.array(si.position), np.array(sj.position)
    vi, vj = np.array(si.velocity), np.array(sj.velocity)
    dp, dv = pj - pi, vj - vi
    distance = float(np.linalg.norm(dp))
    relative_speed = float(np.linalg.norm(dv))
    closing = -float(dp @ dv) / distance if distance > 0 else relative_speed
    dv2 = float(dv @ dv)
    t_min = float(np.clip(-float(dp @ dv) / dv2, 0.0, horizon)) if dv2 > 0 else 0.0
    min_distance = float(np.linalg.norm(dp + dv * t_min))
    crossing = _segments_cross(pi, pi + vi * horizon, pj, pj + vj * horizon)
    return PairFeatures(a, b, distance, relative_speed, closing, min_distance, t_min,
                        bool(crossing), ttc(si, sj, radius, radius))


def _render_text(agents: Sequence[AgentSummary], pairs: Sequence[PairFeatures], horizon: float) -> str:
    lines = [f"The scene contains {len(agents)} vehicle(s)."]
    for s in agents:
        lane = f"in lane {s.lane_id}" if s.lane_id is not None else "off the lane map"
        lines.append(
            f"Vehicle {s.agent_id} is {lane} at ({s.position[0]:.1f}, {s.position[1]:.1f}) m, "
            f"driving {s.speed:.1f} m/s (mean {s.mean_speed:.1f} m/s) with heading "
            f"{math.degrees(s.heading_error):+.0f} deg relative to the lane.")
    for p in pairs:
        ttc_text = "no collision course" if math.isinf(p.min_ttc) else f"time-to-collision {p.min_ttc:.1f} s"
        trend = "closing in" if p.closing_speed > 0 else "not closing"
        crossing = "their paths cross" if p.path_crossing else "their paths do not cross"
        lines.append(
            f"Vehicles {p.agent_i} and {p.agent_j} are {p.distance:.1f} m apart and {trend} "
            f"at {p.closing_speed:.1f} m/s; over {horizon:.0f} s they come within "
            f"{p.min_distance:.1f} m, {crossing}, {ttc_text}.")
    return " ".join(lines)


def describe_scene(scenario: Scenario, horizon: float = DEFAULT_HORIZON,
                   radius: float = DEFAULT_RADIUS) -> SceneDescription:
    if horizon <= 0:
        raise InputError(f"Description horizon must be positive, got {horizon}")
    agents = []
    for traj in scenario.trajectories:
        first = traj.state(0)
        lane_id, heading_error = None, 0.0
        if scenario.map.lanes:
            projection = project_to_lane(first.position, scenario.map)
            lane_id = projection.lane_id
            heading_error = normalize_angle(first.heading - projection.tangent_heading)
        agents.append(AgentSummary(traj.agent_id, lane_id, first.position, first.speed,
                                   first.heading, float(np.mean(traj.speeds)), float(heading_error)))
    ids = sorted(scenario.agent_ids)
    pairs = [_pair_features(scenario, a, b, horizon, radius) for a, b in combinations(ids, 2)]
    return SceneDescription(tuple(agents), tuple(pairs), horizon, _render_text(agents, pairs, horizon))


# ---------------------------------------------------------------------------
# Stage 2: pair selection and proposals
# ---------------------------------------------------------------------------

def interaction_potential(features: PairFeatures,
                          weights: Tuple[float, float, float] = DEFAULT_POTENTIAL_WEIGHTS) -> float:
    w_d, w_c, w_v = weights
    return (w_d / (1.0 + features.min_distance) + w_c * float(features.path_crossing)
            + w_v * max(features.closing_speed, 0.0))


def select_pair(desc: SceneDescription,
                weights: Tuple[float, float, float] = DEFAULT_POTENTIAL_WEIGHTS) -> Tuple[str, str]:
    if len(desc.agents) < 2:
        raise InsufficientAgents(f"Need at least 2 agents, scene has {len(desc.agents)}")
    best, best_score = None, -math.inf
    for features in sorted(desc.pairs, key=lambda p: (p.agent_i, p.agent_j)):
        score = interaction_potential(features, weights)
        if score > best_score:
            best, best_score = features, score
    logger.debug("Selected pair %s/%s with potential %.4f", best.agent_i, best.agent_j, best_score)
    return (best.agent_i, best.agent_j)


def _duration(scenario: Scenario) -> float:
    return (scenario.n_steps - 1) * scenario.dt


def _rule_same_lane(scenario: Scenario, desc: SceneDescription, a: str, b: str) -> Optional[Proposal]:
    sa, sb = desc.agent(a), desc.agent(b)
    if sa.lane_id is None or sa.lane_id != sb.lane_id:
        return None
    if abs(normalize_angle(sa.heading - sb.heading)) > math.pi / 4:
        return None
    lane = scenario.map.lane(sa.lane_id)
    arcs = project_onto_lane(np.array([sa.position, sb.position]), lane).arc_length
    follower, leader = (sa, sb) if arcs[0] <= arcs[1] else (sb, sa)
    leader_arc = float(max(arcs))
    goal = lane.point_at(leader_arc + leader.speed * _duration(scenario) + GOAL_MARGIN)
    return Proposal(
        follower.agent_id, leader.agent_id,
        Intent(IntentKind.REACH_POINT, goal=(float(goal[0]), float(goal[1]))),
        maintain(leader.speed),
        f"same-lane follower/leader: {follower.agent_id} pushes past {leader.agent_id} "
        f"which holds its speed")


def _rule_adjacent_converging(scenario: Scenario, desc: SceneDescription, a: str, b: str) -> Optional[Proposal]:
    sa, sb = desc.agent(a), desc.agent(b)
    if sa.lane_id is None or sb.lane_id is None or sa.lane_id == sb.lane_id:
        return None
    lane_a, lane_b = scenario.map.lane(sa.lane_id), scenario.map.lane(sb.lane_id)
    proj_a = project_onto_lane(np.array([sa.position, sb.position]), lane_a)
    tangent_b = project_onto_lane(np.array([sb.position]), lane_b).tangent_heading[0]
    if abs(normalize_angle(proj_a.tangent_heading[0] - tangent_b)) > math.pi / 6:
        return None
    lateral_ab = float(proj_a.lateral_offset[1] - proj_a.lateral_offset[0])
    if abs(lateral_ab) > 1.6 * max(lane_a.width, lane_b.width):
        return None
    features = desc.pair(a, b)
    if features.closing_speed <= 0 and features.min_distance >= lane_a.width:
        return None
    # the agent further back along the lane changes into the other's lane
    if proj_a.arc_length[0] <= proj_a.arc_length[1]:
        changer, holder, lateral = sa, sb, lateral_ab
    else:
        changer, holder, lateral = sb, sa, -lateral_ab
    kind = IntentKind.LANE_CHANGE_LEFT if lateral > 0 else IntentKind.LANE_CHANGE_RIGHT
    return Proposal(
        changer.agent_id, holder.agent_id,
        Intent(kind, target_lane_id=holder.lane_id),
        maintain(holder.speed),
        f"adjacent-lane converging: {changer.agent_id} cuts into lane {holder.lane_id} "
        f"ahead of {holder.agent_id}")


def _rule_crossing(scenario: Scenario, desc: SceneDescription, a: str, b: str) -> Optional[Proposal]:
    features = desc.pair(a, b)
    sa, sb = desc.agent(a), desc.agent(b)
    if not features.path_crossing or abs(normalize_angle(sa.heading - sb.heading)) < math.pi / 6:
        return None
    pa, pb = np.array(sa.position), np.array(sb.position)
    ua = np.array([math.cos(sa.heading), math.sin(sa.heading)])
    ub = np.array([math.cos(sb.heading), math.sin(sb.heading)])
    conflict = _line_intersection(pa, ua, pb, ub)
    if conflict is None:
        return None
    time_a = np.linalg.norm(conflict - pa) / max(sa.speed, 1e-3)
    time_b = np.linalg.norm(conflict - pb) / max(sb.speed, 1e-3)
    first, second, heading = (sa, sb, ua) if time_a <= time_b else (sb, sa, ub)
    goal = conflict + heading * GOAL_MARGIN
    return Proposal(
        first.agent_id, second.agent_id,
        Intent(IntentKind.REACH_POINT, goal=(float(goal[0]), float(goal[1]))),
        Intent(IntentKind.YIELD, yield_to=first.agent_id),
        f"crossing paths: {first.agent_id} drives through the conflict point, "
        f"{second.agent_id} yields")


HEURISTIC_RULES: List[Callable[[Scenario, SceneDescription, str, str], Optional[Proposal]]] = [
    _rule_same_lane,
    _rule_adjacent_converging,
    _rule_crossing,
]


def propose_heuristic(scenario: Scenario, desc: SceneDescription, pair: Tuple[str, str],
                      backend: str = "heuristic") -> Proposal:
    a, b = pair
    for rule in HEURISTIC_RULES:
        proposal = rule(scenario, desc, a, b)
        if proposal is not None:
            logger.info("Heuristic rule matched: %s", proposal.rationale)
            return Proposal(proposal.agent_i, proposal.agent_j, proposal.intent_i,
                            proposal.intent_j, proposal.rationale, backend)
    logger.info("No heuristic rule matched %s/%s; using fallback", a, b)
    return Proposal(a, b, maintain(desc.agent(a).speed), maintain(desc.agent(b).speed),
                    "fallback", backend)


def propose_random(scenario: Scenario, seed: int = 0) -> Proposal:
    """Random pair with random valid intents; the unguided proposal baseline"""
    if len(scenario.trajectories) < 2:
        raise InsufficientAgents("Need at least 2 agents for a proposal")
    rng = np.random.default_rng(seed)
    ids = sorted(scenario.agent_ids)
    picked = rng.choice(len(ids), size=2, replace=False)
    a, b = ids[int(picked[0])], ids[int(picked[1])]
    kinds = list(IntentKind)

    def random_intent(agent_id: str, partner: str) -> Intent:
        kind = kinds[int(rng.integers(len(kinds)))]
        traj = scenario.trajectory(agent_id)
        first = traj.state(0)
        if kind in (IntentKind.LANE_CHANGE_LEFT, IntentKind.LANE_CHANGE_RIGHT) and scenario.map.lanes:
            lane = scenario.map.lanes[int(rng.integers(len(scenario.map.lanes)))]
            return Intent(kind, target_lane_id=lane.id)
        if kind == IntentKind.YIELD:
            return Intent(kind, yield_to=partner)
        if kind == IntentKind.REACH_POINT:
            reach = first.speed * _duration(scenario) * float(rng.uniform(0.5, 1.5))
            goal = np.array(first.position) + reach * np.array([math.cos(first.heading), math.sin(first.heading)])
            return Intent(kind, goal=(float(goal[0]), float(goal[1])))
        return maintain(first.speed * float(rng.uniform(0.5, 1.5)))

    return Proposal(a, b, random_intent(a, b), random_intent(b, a), "random", "random")


# ---------------------------------------------------------------------------
# Chat-service backend
# ---------------------------------------------------------------------------

def extract_json_object(text: str) -> Tuple[Dict[str, Any], str]:
    """First balanced top-level JSON object in text, with its source fragment"""
    start = text.find("{")
    while start != -1:
        depth, in_string, escaped = 0, False, False
        for index in range(start, len(text)):
            ch = text[index]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    fragment = text[start:index + 1]
                    try:
                        data = json.loads(fragment)
                    except json.JSONDecodeError:
                        break
                    if isinstance(data, dict):
                        return data, fragment
                    break
        start = text.find("{", start + 1)
    raise NoJsonFound("No JSON object found in reply", fragment=text)


def proposal_from_dict(data: Dict[str, Any], scenario: Scenario, backend: str = "service",
                       fragment: Optional[str] = None) -> Proposal:
    """Validate a decoded proposal object against the scenario"""
    if not isinstance(data, dict):
        raise SchemaError("Proposal must be a JSON object", fragment=fragment)
    fragment = fragment if fragment is not None else json.dumps(data)
    for key in ("agent_i", "agent_j"):
        if not isinstance(data.get(key), str):
            raise SchemaError(f"Proposal field '{key}' missing or not a string", fragment=fragment)
    for key in ("intent_i", "intent_j"):
        if key not in data:
            raise SchemaError(f"Proposal field '{key}' missing", fragment=fragment)
    if data["agent_i"] == data["agent_j"]:
        raise SelfPairError(f"Proposal pairs agent {data['agent_i']!r} with itself", fragment=fragment)
    intent_i = Intent.from_dict(data["intent_i"])
    intent_j = Intent.from_dict(data["intent_j"])
    for key in ("agent_i", "agent_j"):
        if data[key] not in scenario.agent_ids:
            raise ProposalReferenceError(f"Unknown agent id {data[key]!r}", fragment=fragment)
    intent_i.check_references(scenario)
    intent_j.check_references(scenario)
    rationale = data.get("rationale", "")
    return Proposal(data["agent_i"], data["agent_j"], intent_i, intent_j,
                    rationale if isinstance(rationale, str) else str(rationale), backend)


def parse_proposal_text(text: str, scenario: Scenario, backend: str = "service") -> Proposal:
    data, fragment = extract_json_object(text)
    return proposal_from_dict(data, scenario, backend, fragment)


def load_proposal(path: str, scenario: Scenario) -> Proposal:
    if not os.path.isfile(path):
        raise InputError(f"Proposal file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"Proposal file {path} is not valid JSON: {e}")
    backend = str(data.get("backend", "file")) if isinstance(data, dict) else "file"
    return proposal_from_dict(data, scenario, backend)


def load_prompt(name: str, prompts_dir: str = PROMPTS_DIR) -> str:
    with open(os.path.join(prompts_dir, f"{name}.txt"), "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    # first line is the asset version header
    if lines and lines[0].startswith("# "):
        lines = lines[1:]
    return "\n".join(lines).strip() + "\n"


def scenario_summary(scenario: Scenario) -> str:
    summary = {
        "dt": scenario.dt,
        "duration_s": _duration(scenario),
        "lanes": [
            {"id": lane.id, "start": [round(float(v), 2) for v in lane.centerline[0]],
             "end": [round(float(v), 2) for v in lane.centerline[-1]],
             "width": lane.width, "speed_limit": lane.speed_limit}
            for lane in scenario.map.lanes
        ],
        "vehicles": [],
    }
    for traj in scenario.trajectories:
        first, last = traj.state(0), traj.state(traj.n_steps - 1)
        lane = project_to_lane(first.position, scenario.map).lane_id if scenario.map.lanes else None
        summary["vehicles"].append({
            "id": traj.agent_id, "lane": lane,
            "first": {"position": [round(v, 2) for v in first.position], "speed": round(first.speed, 2),
                      "heading": round(first.heading, 3)},
            "last": {"position": [round(v, 2) for v in last.position], "speed": round(last.speed, 2)},
        })
    return json.dumps(summary, indent=2)


SYSTEM_PROMPT = "You are a traffic scenario analyst for an autonomous driving simulator."


def _propose_service(scenario: Scenario, desc: SceneDescription, config: ProposerConfig,
                     gateway: ChatGateway) -> Proposal:
    summary = scenario_summary(scenario)
    system = ChatMessage("system", SYSTEM_PROMPT)
    if config.single_stage:
        scene_description = summary
    else:
        describe = load_prompt("describe", config.prompts_dir).replace("{scenario_summary}", summary)
        stage_one = gateway.chat([system, ChatMessage("user", describe)])
        scene_description = desc.rendered_text + "\n\n" + stage_one.strip()

    prompt = load_prompt("propose", config.prompts_dir).replace("{scene_description}", scene_description)
    messages = [system, ChatMessage("user", prompt)]
    last_error: Optional[InputError] = None
    for attempt in range(config.retries + 1):
        reply = gateway.chat(messages)
        try:
            return parse_proposal_text(reply, scenario, backend="service")
        except InputError as e:
            last_error = e
            logger.warning("Proposal reply %d unusable: %s | fragment: %r", attempt + 1, e, e.fragment)
            messages = messages + [
                ChatMessage("assistant", reply if reply.strip() else "(empty reply)"),
                ChatMessage("user", f"Your reply could not be used: {e}. Reply again with exactly "
                                    f"one JSON object following the schema."),
            ]
    raise last_error


def propose(scenario: Scenario, backend: ProposerBackend = ProposerBackend.HEURISTIC,
            config: Optional[ProposerConfig] = None,
            gateway: Optional[ChatGateway] = None) -> Tuple[SceneDescription, Proposal]:
    """Describe-then-propose pipeline"""
    config = config or ProposerConfig()
    desc = describe_scene(scenario, config.horizon, config.radius)
    if backend == ProposerBackend.RANDOM:
        return desc, propose_random(scenario, config.seed)
    if backend == ProposerBackend.HEURISTIC:
        return desc, propose_heuristic(scenario, desc, select_pair(desc, config.weights))

    if gateway is None:
        if config.gateway is None:
            raise InputError("Service backend selected but no gateway is configured")
        gateway = ChatGateway(config.gateway)
    gateway_failure: Optional[GatewayError] = None
    try:
        return desc, _propose_service(scenario, desc, config, gateway)
    except GatewayError as e:
        gateway_failure = e
        logger.warning("Chat service failed (%s); falling back to heuristic proposer", e)
    except InputError as e:
        logger.warning("Service replies exhausted (%s); falling back to heuristic proposer", e)
    try:
        pair = select_pair(desc, config.weights)
    except InsufficientAgents:
        if gateway_failure is not None:
            raise gateway_failure
        raise
    return desc, propose_heuristic(scenario, desc, pair, backend="heuristic-fallback")
