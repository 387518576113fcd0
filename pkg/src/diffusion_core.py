"""
DDPM machinery on flat joint-trajectory tensors.
Layout is agent-major, step-minor, x before y: entry (a, k, c) lives at
index (a * n_steps + k) * 2 + c.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from errors import DimensionMismatch, InputError, InvalidSchedule, SolverFailure

logger = logging.getLogger(__name__)

DEFAULT_T = 50
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.1
DEFAULT_SMOOTHNESS = 50.0
DEFAULT_RIDGE = 1e-4


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t: int, allow_zero: bool = True):
        low = 0 if allow_zero else 1
        if not low <= t <= self.T:
            raise InputError(f"Timestep {t} outside [{low}, {self.T}]")

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        # alpha_bar_0 is 1 by convention
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def to_dict(self) -> Dict[str, float]:
        return {"T": self.T, "beta_min": float(self.beta[0]), "beta_max": float(self.beta[-1])}


def make_schedule(T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN,
                  beta_max: float = DEFAULT_BETA_MAX) -> DiffusionSchedule:
    """Linear beta schedule with cumulative alpha products"""
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise InvalidSchedule(f"T must be an integer >= 1, got {T!r}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidSchedule(f"Need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, int(T))
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for array in (beta, alpha, alpha_bar):
        array.setflags(write=False)
    return DiffusionSchedule(int(T), beta, alpha, alpha_bar)


@dataclass(frozen=True, eq=False)
class TrajectoryTensor:
    values: np.ndarray
    mask: np.ndarray
    observed: np.ndarray
    n_agents: int
    n_steps: int
    agent_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        mask = np.asarray(self.mask, dtype=bool).ravel()
        observed = np.asarray(self.observed, dtype=float).ravel()
        size = self.n_agents * self.n_steps * 2
        if values.size != size or mask.size != size or observed.size != size:
            raise DimensionMismatch(
                f"Tensor of {self.n_agents} agents x {self.n_steps} steps needs {size} entries, "
                f"got values={values.size} mask={mask.size} observed={observed.size}")
        if self.agent_ids and len(self.agent_ids) != self.n_agents:
            raise DimensionMismatch("agent_ids length differs from n_agents")
        values = np.where(mask, observed, values)
        for name, array in (("values", values), ("mask", mask), ("observed", observed)):
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    @property
    def dim(self) -> int:
        return self.values.size

    def index(self, agent: int, step: int, coord: int) -> int:
        return (agent * self.n_steps + step) * 2 + coord

    def positions(self) -> np.ndarray:
        """(n_agents, n_steps, 2) view of the values"""
        return self.values.reshape(self.n_agents, self.n_steps, 2)

    def clamp(self, values: np.ndarray) -> np.ndarray:
        """Force masked entries of one member or a (M, D) batch to the observed values"""
        return np.where(self.mask, self.observed, values)

    def with_values(self, values: np.ndarray) -> "TrajectoryTensor":
        return TrajectoryTensor(values, self.mask, self.observed, self.n_agents,
                                self.n_steps, self.agent_ids)


class Denoiser(Protocol):
    """Maps noisy values at timestep t to a predicted clean sample.

    `values` is either one flat member (D,) or a batch (M, D); the output has
    the same shape.
    """

    def predict(self, values: np.ndarray, t: int, schedule: DiffusionSchedule) -> np.ndarray:
        ...


def second_difference(n: int) -> np.ndarray:
    d2 = np.zeros((max(n - 2, 0), n))
    for row in range(n - 2):
        d2[row, row:row + 3] = (1.0, -2.0, 1.0)
    return d2


def smoothness_precision(n_steps: int, smoothness: float = DEFAULT_SMOOTHNESS,
                         ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    d2 = second_difference(n_steps)
    return smoothness * d2.T @ d2 + ridge * np.eye(n_steps)


@dataclass
class _ChannelGroup:
    channels: np.ndarray      # (n_channels, n_steps) flat indices
    free: np.ndarray          # step indices left to the sampler
    precision_ff: np.ndarray
    mean: np.ndarray          # (n_free, n_channels) conditional prior mean


class GaussianPriorDenoiser:
    """Exact posterior mean under a Gaussian smoothness prior.

    Each coordinate channel has precision smoothness * D2'D2 + ridge * I.
    Clamped entries condition the prior, so the free block of a channel uses
    the conditional mean and the free-free precision block.
    """

    def __init__(self, mean: np.ndarray, n_agents: int, n_steps: int,
                 mask: Optional[np.ndarray] = None, observed: Optional[np.ndarray] = None,
                 smoothness: float = DEFAULT_SMOOTHNESS, ridge: float = DEFAULT_RIDGE):
        if smoothness < 0 or ridge <= 0:
            raise InputError(f"Need smoothness >= 0 and ridge > 0, got {smoothness}, {ridge}")
        size = n_agents * n_steps * 2
        self.mean = np.asarray(mean, dtype=float).ravel()
        if self.mean.size != size:
            raise DimensionMismatch(f"Prior mean has {self.mean.size} entries, expected {size}")
        self.mask = np.zeros(size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
        self.observed = self.mean.copy() if observed is None else np.asarray(observed, dtype=float).ravel()
        if self.mask.size != size or self.observed.size != size:
            raise DimensionMismatch("Prior mask/observed do not match the tensor dimension")
        self.n_agents, self.n_steps = n_agents, n_steps
        self.smoothness, self.ridge = smoothness, ridge
        self.precision = smoothness_precision(n_steps, smoothness, ridge)
        self._groups = self._build_groups()
        self._factors: Dict[Tuple[int, int], tuple] = {}

    @classmethod
    def for_tensor(cls, tensor: TrajectoryTensor, mean: np.ndarray,
                   smoothness: float = DEFAULT_SMOOTHNESS, ridge: float = DEFAULT_RIDGE):
        return cls(mean, tensor.n_agents, tensor.n_steps, tensor.mask, tensor.observed,
                   smoothness, ridge)

    def _build_groups(self):
        steps = np.arange(self.n_steps)
        patterns: Dict[bytes, list] = {}
        for agent in range(self.n_agents):
            for coord in range(2):
                channel = (agent * self.n_steps + steps) * 2 + coord
                patterns.setdefault(self.mask[channel].tobytes(), []).append(channel)

        groups = []
        for key, channels in patterns.items():
            channels = np.array(channels)
            channel_mask = self.mask[channels[0]]
            free, obs = np.flatnonzero(~channel_mask), np.flatnonzero(channel_mask)
            if free.size == 0:
                continue
            p_ff = self.precision[np.ix_(free, free)]
            mu = self.mean[channels].T                       # (n_steps, n_channels)
            mean_f = mu[free]
            if obs.size:
                p_fo = self.precision[np.ix_(free, obs)]
                deviation = self.observed[channels].T[obs] - mu[obs]
                mean_f = mean_f - cho_solve(self._factor(p_ff), p_fo @ deviation)
            groups.append(_ChannelGroup(channels, free, p_ff, mean_f))
        return groups

    @staticmethod
    def _factor(matrix: np.ndarray):
        if not np.all(np.isfinite(matrix)):
            raise SolverFailure("Precision system contains non-finite entries")
        try:
            return cho_factor(matrix, lower=True, check_finite=False)
        except LinAlgError as e:
            raise SolverFailure(f"Precision system is not positive definite: {e}")

    def _system(self, index: int, t: int, alpha_bar: float):
        key = (index, t)
        if key not in self._factors:
            p_ff = self._groups[index].precision_ff
            system = alpha_bar * np.eye(p_ff.shape[0]) + (1.0 - alpha_bar) * p_ff
            self._factors[key] = self._factor(system)
        return self._factors[key]

    def predict(self, values: np.ndarray, t: int, schedule: DiffusionSchedule) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        batch = np.atleast_2d(values)
        if batch.shape[1] != self.mean.size:
            raise DimensionMismatch(f"Denoiser expects {self.mean.size} entries, got {batch.shape[1]}")
        alpha_bar = schedule.alpha_bar_at(t)
        root = np.sqrt(alpha_bar)
        out = np.where(self.mask, self.observed, batch)
        for index, group in enumerate(self._groups):
            cols = group.channels[:, group.free]             # (n_channels, n_free)
            # (M, n_channels, n_free) -> (n_free, M * n_channels)
            xt = batch[:, cols].transpose(2, 0, 1).reshape(len(group.free), -1)
            mean = np.tile(group.mean, (1, batch.shape[0]))
            solved = cho_solve(self._system(index, t, alpha_bar), xt - root * mean)
            x0 = mean + root * solved
            out[:, cols] = x0.reshape(len(group.free), batch.shape[0], -1).transpose(1, 2, 0)
        return out.reshape(values.shape)


def constant_velocity_mean(positions: np.ndarray, n_steps: int, dt: float,
                           conditioned_steps: int, initial_velocity=None) -> np.ndarray:
    """Roll the first conditioned_steps positions forward at their mean velocity"""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    h = max(1, min(conditioned_steps, n_steps, len(positions)))
    if h >= 2:
        velocity = (positions[h - 1] - positions[0]) / ((h - 1) * dt)
    else:
        velocity = np.zeros(2) if initial_velocity is None else np.asarray(initial_velocity, dtype=float)
    out = np.empty((n_steps, 2))
    out[:h] = positions[:h]
    ahead = np.arange(1, n_steps - h + 1)[:, None] * dt
    out[h:] = positions[h - 1] + ahead * velocity
    return out


def _check_noise(tensor: TrajectoryTensor, noise: np.ndarray) -> np.ndarray:
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-1] != tensor.dim or noise.ndim > 2:
        raise DimensionMismatch(f"Noise has shape {noise.shape}, tensor dimension is {tensor.dim}")
    return noise


def noise_values(x0: np.ndarray, t: int, schedule: DiffusionSchedule, noise: np.ndarray) -> np.ndarray:
    alpha_bar = schedule.alpha_bar_at(t)
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise


def forward_noise(x0: TrajectoryTensor, t: int, schedule: DiffusionSchedule,
                  noise: np.ndarray) -> TrajectoryTensor:
    schedule.check_t(t)
    noise = _check_noise(x0, noise)
    if noise.ndim != 1:
        raise DimensionMismatch("forward_noise takes one noise vector")
    return x0.with_values(noise_values(x0.values, t, schedule, noise))


def predict_x0(xt: TrajectoryTensor, t: int, schedule: DiffusionSchedule,
               denoiser: Denoiser) -> TrajectoryTensor:
    schedule.check_t(t)
    out = np.asarray(denoiser.predict(xt.values, t, schedule), dtype=float)
    if out.shape != xt.values.shape:
        raise DimensionMismatch(f"Denoiser returned shape {out.shape}, expected {xt.values.shape}")
    if not np.all(np.isfinite(out)):
        raise SolverFailure(f"Denoiser produced non-finite values at t={t}")
    return xt.with_values(out)


def posterior_coefficients(schedule: DiffusionSchedule, t: int) -> Tuple[float, float, float]:
    """(x0 coefficient, x_t coefficient, variance) of q(x_{t-1} | x_t, x0)"""
    beta = schedule.beta_at(t)
    alpha_bar, alpha_bar_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t - 1)
    c_x0 = np.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)
    c_xt = np.sqrt(schedule.alpha_at(t)) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return float(c_x0), float(c_xt), float(variance)


def reverse_values(xt: np.ndarray, t: int, x0_hat: np.ndarray, schedule: DiffusionSchedule,
                   z: Optional[np.ndarray]) -> np.ndarray:
    c_x0, c_xt, variance = posterior_coefficients(schedule, t)
    mean = c_x0 * x0_hat + c_xt * xt
    if t == 1 or z is None:
        return mean
    return mean + np.sqrt(variance) * z


def reverse_step(xt: TrajectoryTensor, t: int, x0_hat: TrajectoryTensor,
                 schedule: DiffusionSchedule, rng: np.random.Generator) -> TrajectoryTensor:
    schedule.check_t(t, allow_zero=False)
    if x0_hat.dim != xt.dim:
        raise DimensionMismatch("x0_hat and x_t differ in dimension")
    z = None if t == 1 else rng.standard_normal(xt.dim)
    return xt.with_values(reverse_values(xt.values, t, x0_hat.values, schedule, z))


def sample_unguided(template: TrajectoryTensor, denoiser: Denoiser, schedule: DiffusionSchedule,
                    rng: np.random.Generator, mean: Optional[np.ndarray] = None) -> TrajectoryTensor:
    """One full reverse chain started from the terminal forward marginal around mean"""
    start = template.values if mean is None else np.asarray(mean, dtype=float)
    x = template.with_values(noise_values(start, schedule.T, schedule, rng.standard_normal(template.dim)))
    for t in range(schedule.T, 0, -1):
        x = reverse_step(x, t, predict_x0(x, t, schedule, denoiser), schedule, rng)
    return x
