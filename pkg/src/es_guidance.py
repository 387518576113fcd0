"""
Gradient-free evolutionary guidance of the reverse diffusion chain.
At every denoising step the population's predicted clean samples are scored,
a reward softmax picks elites, and the elites continue the chain. Outer search
steps renoise the population to restart exploration.
"""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax
from scipy.stats import entropy

from diffusion_core import (Denoiser, DiffusionSchedule, GaussianPriorDenoiser, TrajectoryTensor,
                            constant_velocity_mean, noise_values, reverse_values)
from errors import ConfigError, InputError, NonFiniteReward, SolverFailure
from metrics import Collision, find_collisions
from proposer import Intent, Proposal, maintain
from scenario import Scenario, Trajectory, trajectory_from_positions
from social_reward import RATIONAL_EGOIST, IntrinsicWeights, SocialParams, joint_reward

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["step_k", "t", "best_reward", "mean_reward", "entropy_q"]


class GuidanceMode(Enum):
    STEPWISE = "stepwise"
    TERMINAL = "terminal"
    UNGUIDED = "unguided"


@dataclass(frozen=True)
class GuidanceConfig:
    population: int = 32
    search_steps: int = 4
    tau_low: float = 1.0
    tau_high: float = 50.0
    renoise_fraction: float = 0.7
    seed: int = 0
    mode: GuidanceMode = GuidanceMode.STEPWISE
    workers: int = 1
    conditioned_steps: int = 10
    joint_all: bool = False
    smoothness: float = 50.0
    ridge: float = 1e-4

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError(f"Population size must be >= 2, got {self.population}")
        if self.search_steps < 1:
            raise ConfigError(f"Search steps must be >= 1, got {self.search_steps}")
        if not 0 <= self.tau_low <= self.tau_high:
            raise ConfigError(f"Need 0 <= tau_low <= tau_high, got {self.tau_low}, {self.tau_high}")
        if not 0.0 < self.renoise_fraction <= 1.0:
            raise ConfigError(f"renoise_fraction must be in (0, 1], got {self.renoise_fraction}")
        if self.seed < 0:
            raise ConfigError(f"Seed must be non-negative, got {self.seed}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.conditioned_steps < 1:
            raise ConfigError("At least the first step of each generated agent is conditioned")
        if not isinstance(self.mode, GuidanceMode):
            object.__setattr__(self, "mode", GuidanceMode(self.mode))

    def to_dict(self) -> Dict[str, object]:
        return {
            "population": self.population, "search_steps": self.search_steps,
            "tau_low": self.tau_low, "tau_high": self.tau_high,
            "renoise_fraction": self.renoise_fraction, "seed": self.seed,
            "mode": self.mode.value, "workers": self.workers,
            "conditioned_steps": self.conditioned_steps, "joint_all": self.joint_all,
            "smoothness": self.smoothness, "ridge": self.ridge,
        }


@dataclass(frozen=True, eq=False)
class Population:
    members: np.ndarray
    rewards: np.ndarray
    t: int
    parents: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.members.ndim != 2 or self.members.shape[0] < 2:
            raise InputError(f"Population needs an (M >= 2, D) member array, got {self.members.shape}")
        if self.rewards.shape != (self.members.shape[0],):
            raise InputError("Population rewards do not match its members")

    @property
    def size(self) -> int:
        return self.members.shape[0]


@dataclass(frozen=True, eq=False)
class EliteDistribution:
    weights: np.ndarray

    @property
    def entropy(self) -> float:
        return float(entropy(self.weights))


@dataclass(frozen=True)
class TraceRow:
    step_k: int
    t: int
    best_reward: float
    mean_reward: float
    entropy_q: float

    def to_row(self) -> List[str]:
        return [str(self.step_k), str(self.t), f"{self.best_reward:.9g}",
                f"{self.mean_reward:.9g}", f"{self.entropy_q:.9g}"]


@dataclass(eq=False)
class GuidanceOutcome:
    best_values: np.ndarray
    best_reward: float
    trace: List[TraceRow]
    population: Population


@dataclass(eq=False)
class GenerationResult:
    scenario: Scenario
    best_reward: float
    trace: List[TraceRow]
    population: Population
    proposal: Proposal
    generated_ids: Tuple[str, ...] = ()
    params: Dict[str, SocialParams] = field(default_factory=dict)
    # disc overlaps involving a generated agent, checked on the returned scene
    collisions: Tuple[Collision, ...] = ()


def temperature(t: int, schedule: DiffusionSchedule, tau_low: float, tau_high: float) -> float:
    """Selection gain, tau_low at t=T rising linearly to tau_high at t=0"""
    schedule.check_t(t)
    return tau_high + (tau_low - tau_high) * (t / schedule.T)


def elite_distribution(rewards: Sequence[float], tau: float) -> EliteDistribution:
    rewards = np.asarray(rewards, dtype=float)
    bad = np.flatnonzero(~np.isfinite(rewards))
    if bad.size:
        raise NonFiniteReward(int(bad[0]), float(rewards[bad[0]]))
    if tau < 0:
        raise InputError(f"Selection gain must be >= 0, got {tau}")
    return EliteDistribution(softmax(tau * (rewards - rewards.max())))


def resample_elites(pop: Population, q: EliteDistribution, rng: np.random.Generator) -> Population:
    picked = rng.choice(pop.size, size=pop.size, replace=True, p=q.weights)
    return Population(pop.members[picked], pop.rewards[picked], pop.t, parents=picked)


def _member_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([seed, *path])


class _RewardEvaluator:
    """Scores a batch in member order, optionally on a thread pool"""

    def __init__(self, reward_fn: Callable[[np.ndarray], float], workers: int):
        self.reward_fn = reward_fn
        self.pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        if self.pool is None:
            rewards = [self.reward_fn(member) for member in batch]
        else:
            rewards = list(self.pool.map(self.reward_fn, batch))
        rewards = np.asarray(rewards, dtype=float)
        bad = np.flatnonzero(~np.isfinite(rewards))
        if bad.size:
            raise NonFiniteReward(int(bad[0]), float(rewards[bad[0]]))
        return rewards

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _denoise(denoiser: Denoiser, template: TrajectoryTensor, members: np.ndarray, t: int,
             schedule: DiffusionSchedule) -> np.ndarray:
    x0_hat = template.clamp(np.asarray(denoiser.predict(members, t, schedule), dtype=float))
    if x0_hat.shape != members.shape:
        raise InputError(f"Denoiser returned shape {x0_hat.shape}, expected {members.shape}")
    if not np.all(np.isfinite(x0_hat)):
        raise SolverFailure(f"Denoiser produced non-finite values at t={t}")
    return x0_hat


def run_guidance(template: TrajectoryTensor, reward_fn: Callable[[np.ndarray], float],
                 config: GuidanceConfig, denoiser: Denoiser, schedule: DiffusionSchedule,
                 start_mean: Optional[np.ndarray] = None) -> GuidanceOutcome:
    """Evolutionary guidance over flat member values.

    reward_fn scores one predicted clean sample. Every chain starts from the
    terminal forward marginal around start_mean (the template values when
    omitted); later search steps renoise the previous step's final samples.
    """
    m, dim = config.population, template.dim
    seed = config.seed
    start = template.values if start_mean is None else template.clamp(np.asarray(start_mean, dtype=float))
    evaluate = _RewardEvaluator(reward_fn, config.workers)
    renoise_t = max(1, math.ceil(config.renoise_fraction * schedule.T))

    best_values, best_reward = None, -math.inf
    trace: List[TraceRow] = []
    members = np.empty((m, dim))
    rewards = np.zeros(m)

    def archive(x0_hat: np.ndarray, scores: np.ndarray):
        nonlocal best_values, best_reward
        top = int(np.argmax(scores))
        if scores[top] > best_reward:
            best_values, best_reward = x0_hat[top].copy(), float(scores[top])

    try:
        for k in range(1, config.search_steps + 1):
            if k == 1:
                t_start, origin = schedule.T, np.tile(start, (m, 1))
            else:
                t_start, origin = renoise_t, members
            noise = np.stack([_member_rng(seed, 2, k, i).standard_normal(dim) for i in range(m)])
            members = template.clamp(noise_values(origin, t_start, schedule, noise))
            logger.debug("Search step %d/%d from t=%d", k, config.search_steps, t_start)

            for t in range(t_start, 0, -1):
                x0_hat = _denoise(denoiser, template, members, t, schedule)
                select = (config.mode == GuidanceMode.STEPWISE
                          or (config.mode == GuidanceMode.TERMINAL and t == 1))
                scored = select or (config.mode == GuidanceMode.UNGUIDED and t == 1)
                if scored:
                    rewards = evaluate(x0_hat)
                    archive(x0_hat, rewards)
                    if select:
                        q = elite_distribution(rewards, temperature(t, schedule, config.tau_low,
                                                                    config.tau_high))
                    else:
                        q = EliteDistribution(np.full(m, 1.0 / m))
                    trace.append(TraceRow(k, t, best_reward, float(np.mean(rewards)), q.entropy))
                    if select:
                        elites = resample_elites(Population(members, rewards, t), q,
                                                 _member_rng(seed, 1, k, t))
                        picked = elites.parents
                        members, x0_hat, rewards = elites.members, x0_hat[picked], elites.rewards

                z = None
                if t > 1:
                    z = np.stack([_member_rng(seed, 0, k, t, i).standard_normal(dim) for i in range(m)])
                members = template.clamp(reverse_values(members, t, x0_hat, schedule, z))
    finally:
        evaluate.close()

    return GuidanceOutcome(best_values, best_reward, trace, Population(members, rewards, 0))


# ---------------------------------------------------------------------------
# Scenario plumbing
# ---------------------------------------------------------------------------

def build_conditioning(scenario: Scenario, generated_ids: Sequence[str],
                       conditioned_steps: int) -> Tuple[TrajectoryTensor, np.ndarray]:
    """Tensor template (observed values + mask) and constant-velocity prior mean.

    Generated agents keep their first conditioned_steps positions; every other
    agent is clamped to its full recorded trajectory.
    """
    n_steps, dt = scenario.n_steps, scenario.dt
    ids = tuple(scenario.agent_ids)
    observed = np.empty((len(ids), n_steps, 2))
    mask = np.ones((len(ids), n_steps, 2), dtype=bool)
    mean = np.empty((len(ids), n_steps, 2))
    h = min(conditioned_steps, n_steps)
    for a, agent_id in enumerate(ids):
        traj = scenario.trajectory(agent_id)
        observed[a] = traj.positions
        if agent_id in generated_ids:
            mask[a, h:] = False
            mean[a] = constant_velocity_mean(traj.positions, n_steps, dt, h, traj.state(0).velocity)
        else:
            mean[a] = traj.positions
    template = TrajectoryTensor(mean.ravel(), mask.ravel(), observed.ravel(), len(ids), n_steps, ids)
    return template, mean.ravel()


def decode(values: np.ndarray, template: TrajectoryTensor, scenario: Scenario,
           generated_ids: Sequence[str]) -> Scenario:
    """Positions back to a scenario; generated agents get re-derived speed and heading"""
    positions = np.asarray(values, dtype=float).reshape(template.n_agents, template.n_steps, 2)
    trajectories: List[Trajectory] = []
    for a, agent_id in enumerate(template.agent_ids):
        original = scenario.trajectory(agent_id)
        if agent_id in generated_ids:
            trajectories.append(trajectory_from_positions(agent_id, positions[a], scenario.dt,
                                                          original.state(0).heading))
        else:
            trajectories.append(original)
    return scenario.with_trajectories(trajectories)


def generation_intents(scenario: Scenario, proposal: Proposal,
                       joint_all: bool) -> Tuple[Tuple[str, ...], Dict[str, Intent]]:
    """Generated agent ids and the intent each one is scored on"""
    intents = dict(proposal.intents)
    if not joint_all:
        return proposal.pair, intents
    for agent_id in scenario.agent_ids:
        if agent_id not in intents:
            intents[agent_id] = maintain(scenario.trajectory(agent_id).state(0).speed)
    return tuple(scenario.agent_ids), intents


def guided_sample(scenario: Scenario, proposal: Proposal, params: Mapping[str, SocialParams],
                  config: GuidanceConfig, schedule: DiffusionSchedule,
                  denoiser: Optional[Denoiser] = None,
                  weights: Optional[IntrinsicWeights] = None) -> GenerationResult:
    """Generate the proposal pair (or every agent in joint-all mode) under guidance"""
    for agent_id in proposal.pair:
        if agent_id not in scenario.agent_ids:
            raise InputError(f"Proposal agent {agent_id!r} is not in the scenario")
    weights = weights or IntrinsicWeights()
    generated, intents = generation_intents(scenario, proposal, config.joint_all)
    resolved = {agent_id: params.get(agent_id, RATIONAL_EGOIST) for agent_id in intents}
    template, mean = build_conditioning(scenario, generated, config.conditioned_steps)
    if denoiser is None:
        denoiser = GaussianPriorDenoiser.for_tensor(template, mean, config.smoothness, config.ridge)

    def reward_fn(values: np.ndarray) -> float:
        joint = decode(values, template, scenario, generated)
        return joint_reward(joint, proposal.pair, resolved, intents, weights)

    logger.info("Guided sampling of %s (%s mode, M=%d, K=%d, seed %d)", ", ".join(generated),
                config.mode.value, config.population, config.search_steps, config.seed)
    outcome = run_guidance(template, reward_fn, config, denoiser, schedule, start_mean=mean)
    best = decode(outcome.best_values, template, scenario, generated)
    logger.info("Best joint reward %.4f", outcome.best_reward)
    collisions = tuple(find_collisions(best, weights.radius, generated))
    for hit in collisions:
        logger.warning("Agents %s and %s overlap from step %d (gap %.2f m)",
                       hit.agent_a, hit.agent_b, hit.step, hit.distance)
    return GenerationResult(best, outcome.best_reward, outcome.trace, outcome.population,
                            proposal, generated, resolved, collisions)


def write_trace_csv(trace: Sequence[TraceRow], path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow(row.to_row())
