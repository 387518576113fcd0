"""
Run configuration and social preference presets.
Handles the JSON run config layering and named preset persistence.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

from diffusion_core import DiffusionSchedule, make_schedule
from errors import ConfigError, InputError
from es_guidance import GuidanceConfig, GuidanceMode
from llm_gateway import GatewayConfig
from metrics import DEFAULT_RADIUS, DEFAULT_TTC_THRESHOLD
from proposer import DEFAULT_HORIZON, DEFAULT_POTENTIAL_WEIGHTS, ProposerBackend, ProposerConfig
from social_reward import IntrinsicWeights, SocialParams

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "run_config.resolved.json"

BUILTIN_PRESETS: Dict[str, Dict[str, Any]] = {
    "rational-egoist": {"description": "Pure self-interest", "lambda": 1.0, "phi": 0.0},
    "prosocial": {"description": "Weighs the partner's utility", "lambda": 1.0, "phi": math.pi / 4},
    "competitive": {"description": "Gains from the partner's loss", "lambda": 1.0, "phi": -math.pi / 4},
    "goal-driven": {"description": "Task reward outweighs driving norms", "lambda": 0.5, "phi": 0.0},
    "task-focused": {"description": "Task reward dominates", "lambda": 0.3, "phi": 0.0},
}


@dataclass
class RunConfig:
    """Effective settings of one CLI run"""

    # Inputs and outputs
    scenario: str = ""
    proposal: str = ""
    output_dir: str = "output"
    seed: Optional[int] = None
    plot: bool = False
    joint_all: bool = False
    preset: str = ""

    # Proposer
    backend: str = ProposerBackend.HEURISTIC.value
    horizon: float = DEFAULT_HORIZON
    potential_weights: Tuple[float, float, float] = DEFAULT_POTENTIAL_WEIGHTS
    retries: int = 2
    single_stage: bool = False

    # Chat gateway (the API key only ever comes from the environment)
    base_url: str = "http://127.0.0.1:8000/v1"
    model: str = "default"
    timeout: float = 30.0
    max_retries: int = 3
    temperature: float = 0.2

    # Social preference of the generated pair, plus per-agent overrides
    lam: float = 1.0
    phi: float = 0.0
    social_overrides: Dict[str, SocialParams] = field(default_factory=dict)
    weights: IntrinsicWeights = field(default_factory=IntrinsicWeights)

    # Guidance
    population: int = 32
    search_steps: int = 4
    tau_low: float = 1.0
    tau_high: float = 50.0
    renoise_fraction: float = 0.7
    mode: str = GuidanceMode.STEPWISE.value
    workers: int = 1

    # Schedule and prior
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.1
    smoothness: float = 50.0
    ridge: float = 1e-4
    conditioned_steps: int = 10

    # Metrics
    ttc_threshold: float = DEFAULT_TTC_THRESHOLD
    radius: float = DEFAULT_RADIUS

    # Batch commands
    phis: List[float] = field(default_factory=lambda: [-math.pi / 4, 0.0, math.pi / 4])
    lambdas: List[float] = field(default_factory=lambda: [0.3, 0.5, 1.0])
    n_seeds: int = 20

    @property
    def social(self) -> SocialParams:
        return SocialParams(self.lam, self.phi)

    def params_for(self, agent_ids) -> Dict[str, SocialParams]:
        params = {agent_id: self.social for agent_id in agent_ids}
        params.update(self.social_overrides)
        return params

    def guidance_config(self, seed: Optional[int] = None, mode: Optional[GuidanceMode] = None) -> GuidanceConfig:
        return GuidanceConfig(
            population=self.population, search_steps=self.search_steps,
            tau_low=self.tau_low, tau_high=self.tau_high,
            renoise_fraction=self.renoise_fraction,
            seed=self.seed if seed is None else seed,
            mode=mode or GuidanceMode(self.mode), workers=self.workers,
            conditioned_steps=self.conditioned_steps, joint_all=self.joint_all,
            smoothness=self.smoothness, ridge=self.ridge)

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.T, self.beta_min, self.beta_max)

    def gateway_config(self) -> GatewayConfig:
        return GatewayConfig.from_env(base_url=self.base_url, model=self.model, timeout=self.timeout,
                                      max_retries=self.max_retries, temperature=self.temperature)

    def proposer_config(self) -> ProposerConfig:
        gateway = self.gateway_config() if self.backend == ProposerBackend.SERVICE.value else None
        return ProposerConfig(horizon=self.horizon, weights=tuple(self.potential_weights),
                              retries=self.retries, single_stage=self.single_stage,
                              seed=self.seed or 0, radius=self.radius, gateway=gateway)


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Convert RunConfig to the sectioned JSON layout"""
    return {
        'scenario': config.scenario,
        'proposal': config.proposal,
        'output_dir': config.output_dir,
        'seed': config.seed,
        'plot': config.plot,
        'joint_all': config.joint_all,
        'preset': config.preset,
        'proposer': {
            'backend': config.backend,
            'horizon': config.horizon,
            'weights': list(config.potential_weights),
            'retries': config.retries,
            'single_stage': config.single_stage,
        },
        'gateway': {
            'base_url': config.base_url,
            'model': config.model,
            'timeout': config.timeout,
            'max_retries': config.max_retries,
            'temperature': config.temperature,
        },
        'social': config.social.to_dict(),
        'social_overrides': {k: v.to_dict() for k, v in sorted(config.social_overrides.items())},
        'weights': config.weights.to_dict(),
        'guidance': {
            'population': config.population,
            'search_steps': config.search_steps,
            'tau_low': config.tau_low,
            'tau_high': config.tau_high,
            'renoise_fraction': config.renoise_fraction,
            'mode': config.mode,
            'workers': config.workers,
        },
        'schedule': {'T': config.T, 'beta_min': config.beta_min, 'beta_max': config.beta_max},
        'prior': {
            'smoothness': config.smoothness,
            'ridge': config.ridge,
            'conditioned_steps': config.conditioned_steps,
        },
        'metrics': {'ttc_threshold': config.ttc_threshold, 'radius': config.radius},
        'sweep': {'phis': list(config.phis), 'lambdas': list(config.lambdas), 'n_seeds': config.n_seeds},
    }


def _section(data: Dict[str, Any], name: str) -> Dict[str, Any]:
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"Config section '{name}' must be an object")
    return value


def dict_to_config(data: Dict[str, Any]) -> RunConfig:
    """Convert the JSON layout to RunConfig; missing keys keep their defaults"""
    if not isinstance(data, dict):
        raise ConfigError("Run config must be a JSON object")
    defaults = RunConfig()
    proposer = _section(data, 'proposer')
    gateway = _section(data, 'gateway')
    social = _section(data, 'social')
    guidance = _section(data, 'guidance')
    schedule = _section(data, 'schedule')
    prior = _section(data, 'prior')
    metrics = _section(data, 'metrics')
    sweep = _section(data, 'sweep')
    if 'api_key' in gateway:
        raise ConfigError("API keys are read from the environment, not from config files")

    try:
        config = RunConfig(
            scenario=data.get('scenario', defaults.scenario),
            proposal=data.get('proposal', defaults.proposal),
            output_dir=data.get('output_dir', defaults.output_dir),
            seed=data.get('seed', defaults.seed),
            plot=bool(data.get('plot', defaults.plot)),
            joint_all=bool(data.get('joint_all', defaults.joint_all)),
            preset=data.get('preset', defaults.preset),

            backend=proposer.get('backend', defaults.backend),
            horizon=float(proposer.get('horizon', defaults.horizon)),
            potential_weights=tuple(proposer.get('weights', defaults.potential_weights)),
            retries=int(proposer.get('retries', defaults.retries)),
            single_stage=bool(proposer.get('single_stage', defaults.single_stage)),

            base_url=gateway.get('base_url', defaults.base_url),
            model=gateway.get('model', defaults.model),
            timeout=float(gateway.get('timeout', defaults.timeout)),
            max_retries=int(gateway.get('max_retries', defaults.max_retries)),
            temperature=float(gateway.get('temperature', defaults.temperature)),

            lam=float(social.get('lambda', defaults.lam)),
            phi=float(social.get('phi', defaults.phi)),
            social_overrides={k: SocialParams.from_dict(v)
                              for k, v in _section(data, 'social_overrides').items()},
            weights=IntrinsicWeights.from_dict(_section(data, 'weights')),

            population=int(guidance.get('population', defaults.population)),
            search_steps=int(guidance.get('search_steps', defaults.search_steps)),
            tau_low=float(guidance.get('tau_low', defaults.tau_low)),
            tau_high=float(guidance.get('tau_high', defaults.tau_high)),
            renoise_fraction=float(guidance.get('renoise_fraction', defaults.renoise_fraction)),
            mode=guidance.get('mode', defaults.mode),
            workers=int(guidance.get('workers', defaults.workers)),

            T=int(schedule.get('T', defaults.T)),
            beta_min=float(schedule.get('beta_min', defaults.beta_min)),
            beta_max=float(schedule.get('beta_max', defaults.beta_max)),
            smoothness=float(prior.get('smoothness', defaults.smoothness)),
            ridge=float(prior.get('ridge', defaults.ridge)),
            conditioned_steps=int(prior.get('conditioned_steps', defaults.conditioned_steps)),

            ttc_threshold=float(metrics.get('ttc_threshold', defaults.ttc_threshold)),
            radius=float(metrics.get('radius', defaults.radius)),

            phis=[float(v) for v in sweep.get('phis', defaults.phis)],
            lambdas=[float(v) for v in sweep.get('lambdas', defaults.lambdas)],
            n_seeds=int(sweep.get('n_seeds', defaults.n_seeds)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid run config value: {e}")
    validate_config(config)
    return config


def validate_config(config: RunConfig):
    if config.backend not in {b.value for b in ProposerBackend}:
        raise ConfigError(f"Unknown proposer backend {config.backend!r}")
    if config.mode not in {m.value for m in GuidanceMode}:
        raise ConfigError(f"Unknown guidance mode {config.mode!r}")
    if len(config.potential_weights) != 3:
        raise ConfigError("Interaction potential needs exactly three weights")
    if config.seed is not None and (isinstance(config.seed, bool) or not isinstance(config.seed, int)
                                    or config.seed < 0):
        raise ConfigError(f"Seed must be a non-negative integer, got {config.seed!r}")
    if config.n_seeds < 1:
        raise ConfigError("Batch commands need at least one seed")
    if config.ttc_threshold <= 0 or config.radius <= 0:
        raise ConfigError("TTC threshold and collision radius must be positive")
    SocialParams(config.lam, config.phi)
    config.guidance_config(seed=config.seed or 0)
    config.schedule()


def load_run_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    logger.debug("Loaded run config from %s", path)
    return dict_to_config(data)


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Set every non-None override on a copy of config"""
    data = dict(config.__dict__)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in data:
            raise ConfigError(f"Unknown config field {key!r}")
        data[key] = value
    updated = RunConfig(**data)
    validate_config(updated)
    return updated


def save_resolved(config: RunConfig, output_dir: str) -> str:
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, RESOLVED_CONFIG_NAME)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config_to_dict(config), f, indent=2, ensure_ascii=False)
    return path


class PresetManager:
    """Manages named social-preference presets"""

    def __init__(self, presets_dir: str = "presets"):
        self.presets_dir = presets_dir
        self.presets_file = os.path.join(presets_dir, "presets.json")
        self.presets = self.load_presets_from_file()

    def save_preset(self, name: str, params: SocialParams, description: str = "") -> bool:
        """Save social params under a preset name"""
        self.presets[name] = {
            'name': name,
            'description': description,
            'params': params.to_dict(),
            'created_at': self.get_current_timestamp(),
        }
        return self.save_presets_to_file()

    def load_preset(self, name: str) -> Optional[SocialParams]:
        """Stored preset first, then the built-in table"""
        if name in self.presets:
            try:
                return SocialParams.from_dict(self.presets[name]['params'])
            except (KeyError, TypeError, ValueError, InputError) as e:
                logger.warning("Preset %s is invalid: %s", name, e)
                return None
        if name in BUILTIN_PRESETS:
            return SocialParams.from_dict(BUILTIN_PRESETS[name])
        return None

    def resolve(self, name: str) -> SocialParams:
        params = self.load_preset(name)
        if params is None:
            raise ConfigError(f"Unknown social preset {name!r}; available: {', '.join(self.get_preset_list())}")
        return params

    def delete_preset(self, name: str) -> bool:
        if name in self.presets:
            del self.presets[name]
            return self.save_presets_to_file()
        return False

    def get_preset_list(self) -> List[str]:
        return sorted(set(self.presets) | set(BUILTIN_PRESETS))

    def get_preset_info(self, name: str) -> Optional[Dict[str, Any]]:
        if name in self.presets:
            entry = self.presets[name]
            return {'name': name, 'description': entry.get('description', ''),
                    'created_at': entry.get('created_at', ''), 'builtin': False}
        if name in BUILTIN_PRESETS:
            return {'name': name, 'description': BUILTIN_PRESETS[name]['description'],
                    'created_at': '', 'builtin': True}
        return None

    def load_presets_from_file(self) -> Dict[str, Any]:
        if not os.path.exists(self.presets_file):
            return {}
        try:
            with open(self.presets_file, 'r', encoding='utf-8') as f:
                data = json.load(f)
            return data if isinstance(data, dict) else {}
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("Could not load presets from %s: %s", self.presets_file, e)
            return {}

    def save_presets_to_file(self) -> bool:
        try:
            os.makedirs(self.presets_dir, exist_ok=True)
            with open(self.presets_file, 'w', encoding='utf-8') as f:
                json.dump(self.presets, f, indent=2, ensure_ascii=False)
            return True
        except OSError as e:
            logger.error("Error saving presets to %s: %s", self.presets_file, e)
            return False

    def export_preset(self, name: str, export_path: str) -> bool:
        params = self.load_preset(name)
        if params is None:
            return False
        info = self.get_preset_info(name)
        entry = {'name': name, 'description': info['description'], 'params': params.to_dict()}
        try:
            with open(export_path, 'w', encoding='utf-8') as f:
                json.dump(entry, f, indent=2, ensure_ascii=False)
            return True
        except OSError as e:
            logger.error("Error exporting preset %s: %s", name, e)
            return False

    def import_preset(self, import_path: str) -> Optional[str]:
        """Import a preset file; name clashes get a numeric suffix"""
        try:
            with open(import_path, 'r', encoding='utf-8') as f:
                entry = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error("Error importing preset from %s: %s", import_path, e)
            return None
        if not isinstance(entry, dict) or not all(key in entry for key in ('name', 'params')):
            return None
        try:
            params = SocialParams.from_dict(entry['params'])
        except (KeyError, TypeError, ValueError, InputError) as e:
            logger.error("Preset in %s is invalid: %s", import_path, e)
            return None

        name = original_name = entry['name']
        counter = 1
        while name in self.presets or name in BUILTIN_PRESETS:
            name = f"{original_name}_{counter}"
            counter += 1
        if self.save_preset(name, params, entry.get('description', '')):
            return name
        return None

    def get_current_timestamp(self) -> str:
        return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def resolve_run_config(config_path: Optional[str], overrides: Dict[str, Any],
                       presets: Optional[PresetManager] = None) -> RunConfig:
    """Defaults, then the config file, then the preset, then flags"""
    config = load_run_config(config_path) if config_path else RunConfig()
    preset = overrides.get('preset') or config.preset
    if preset:
        params = (presets or PresetManager()).resolve(preset)
        config = apply_overrides(config, {'preset': preset, 'lam': params.lam, 'phi': params.phi})
    return apply_overrides(config, overrides)
