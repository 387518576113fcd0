"""
Command-line surface: propose, generate, evaluate, sweep, ablate, fixture
and preset commands.
Exit codes: 0 success, 2 input/validation, 3 gateway, 4 numerical failure.
"""

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config_manager import PresetManager, RunConfig, resolve_run_config, save_resolved
from diffusion_core import DiffusionSchedule
from errors import InputError, SocialGenError
from es_guidance import GenerationResult, GuidanceMode, guided_sample, write_trace_csv
from file_manager import FileManager, ensure_output_directory
from fixtures import build_fixture, fixture_names
from metrics import (CSV_COLUMNS, MetricsReport, engagement_ratio, evaluate_scenario, mean_or_nan,
                     summary_line, write_metrics_csv)
from plot_renderer import render_scenario
from proposer import (Proposal, ProposerBackend, describe_scene, load_proposal, propose,
                      propose_heuristic, propose_random, proposal_from_dict, render_proposal,
                      select_pair)
from scenario import Scenario, load_scenario, save_scenario
from social_reward import SocialParams, extrinsic_pair

logger = logging.getLogger("socialgen")

LOG_FILE_NAME = "socialgen.log"
SWEEP_COLUMNS = ["phi", "lambda", "n", "engagement_ratio", "mean_max_accel", "mean_extrinsic",
                 "mean_max_rel_vel", "delta_engagement_pct", "delta_accel_pct",
                 "delta_extrinsic_pct", "error"]
ABLATION_COLUMNS = ["variant", "proposer", "mode", "n", "engagement_ratio", "mean_max_rel_vel",
                    "mean_max_accel", "mean_extrinsic", "error"]


def setup_logging(output_dir: Optional[str] = None, level: int = logging.INFO) -> None:
    handlers = [logging.StreamHandler(sys.stdout)]
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(output_dir, LOG_FILE_NAME), encoding="utf-8"))
    logging.basicConfig(
        level=level,
        format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=handlers,
        force=True,
    )


def shutdown_logging() -> None:
    """Close handlers so log files are released"""
    root_logger = logging.getLogger()
    for handler in root_logger.handlers[:]:
        handler.close()
        root_logger.removeHandler(handler)


_PI_EXPR = re.compile(r"^([+-]?)(\d*\.?\d*)\*?pi(?:/(\d+(?:\.\d+)?))?$")


def parse_angle(text: str) -> float:
    """Float or a multiple of pi such as 'pi/4', '-pi/4' or '0.5pi'"""
    text = text.strip().lower()
    try:
        return float(text)
    except ValueError:
        pass
    match = _PI_EXPR.match(text)
    if not match:
        raise argparse.ArgumentTypeError(f"not an angle: {text!r}")
    sign, factor, divisor = match.groups()
    value = (float(factor) if factor else 1.0) * math.pi / (float(divisor) if divisor else 1.0)
    return -value if sign == "-" else value


def parse_angle_list(text: str) -> List[float]:
    return [parse_angle(part) for part in text.split(",") if part.strip()]


def parse_float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _load_scenario(config: RunConfig, default_fixture: Optional[str] = None) -> Tuple[Scenario, str]:
    if config.scenario:
        name = os.path.splitext(os.path.basename(config.scenario))[0]
        return load_scenario(config.scenario), name
    if default_fixture:
        logger.info("No scenario given; using the %s fixture", default_fixture)
        return build_fixture(default_fixture), default_fixture
    raise InputError("No scenario given (--scenario or 'scenario' in the config file)")


def _make_proposal(scenario: Scenario, config: RunConfig, backend: Optional[str] = None,
                   single_stage: Optional[bool] = None):
    proposer_config = config.proposer_config()
    if single_stage is not None:
        proposer_config.single_stage = single_stage
    return propose(scenario, ProposerBackend(backend or config.backend), proposer_config)


def _recorded_or_heuristic(scenario: Scenario, config: RunConfig) -> Proposal:
    recorded = scenario.metadata.get("proposal")
    if isinstance(recorded, dict):
        return proposal_from_dict(recorded, scenario, str(recorded.get("backend", "recorded")))
    desc = describe_scene(scenario, config.horizon, config.radius)
    return propose_heuristic(scenario, desc, select_pair(desc, tuple(config.potential_weights)))


def _report(scenario: Scenario, proposal: Proposal, config: RunConfig, scenario_id: str) -> MetricsReport:
    extrinsic = extrinsic_pair(scenario, proposal.pair, proposal.intents)
    return evaluate_scenario(scenario, proposal.pair, extrinsic, config.ttc_threshold,
                             config.radius, scenario_id)


def _generate_one(scenario: Scenario, proposal: Proposal, config: RunConfig, seed: int,
                  params: Dict[str, SocialParams], schedule: DiffusionSchedule,
                  mode: Optional[GuidanceMode] = None, workers: Optional[int] = None) -> GenerationResult:
    guidance = config.guidance_config(seed=seed, mode=mode)
    if workers is not None:
        guidance = replace(guidance, workers=workers)
    return guided_sample(scenario, proposal, params, guidance, schedule, weights=config.weights)


def _with_generation_metadata(result: GenerationResult, config: RunConfig, seed: int,
                              source_name: str) -> Scenario:
    metadata = dict(result.scenario.metadata)
    metadata.update({
        "name": f"{source_name}_generated",
        "source": source_name,
        "proposal": result.proposal.to_dict(),
        "params": {agent_id: p.to_dict() for agent_id, p in sorted(result.params.items())},
        "generated_agents": list(result.generated_ids),
        "seed": seed,
        "mode": config.mode,
        "best_reward": result.best_reward,
        "collisions": [hit.to_dict() for hit in result.collisions],
    })
    return result.scenario.with_trajectories(result.scenario.trajectories, metadata)


@dataclass
class BatchSummary:
    n: int
    engagement_ratio: float
    mean_max_accel: float
    mean_extrinsic: float
    mean_max_rel_vel: float


def summarize(reports: Sequence[MetricsReport]) -> BatchSummary:
    return BatchSummary(
        n=len(reports),
        engagement_ratio=engagement_ratio(reports),
        mean_max_accel=mean_or_nan([r.max_acceleration for r in reports]),
        mean_extrinsic=mean_or_nan([(r.extrinsic_reward_i + r.extrinsic_reward_j) / 2.0 for r in reports]),
        mean_max_rel_vel=mean_or_nan([r.max_relative_velocity for r in reports]),
    )


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.6g}"


def _write_csv(path: str, columns: Sequence[str], rows: Sequence[Sequence[str]]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows(rows)


def _seeds(config: RunConfig) -> List[int]:
    base = config.seed or 0
    return list(range(base, base + config.n_seeds))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_propose(config: RunConfig) -> int:
    scenario, _ = _load_scenario(config)
    output_dir = ensure_output_directory(config.output_dir)
    desc, proposal = _make_proposal(scenario, config)
    with open(os.path.join(output_dir, "proposal.json"), "w", encoding="utf-8") as f:
        f.write(render_proposal(proposal) + "\n")
    with open(os.path.join(output_dir, "description.txt"), "w", encoding="utf-8") as f:
        f.write(desc.rendered_text + "\n")
    save_resolved(config, output_dir)
    print(f"✓ Proposal ({proposal.backend}): {proposal.agent_i} {proposal.intent_i.kind.value}, "
          f"{proposal.agent_j} {proposal.intent_j.kind.value}")
    print(f"✓ Wrote {os.path.join(output_dir, 'proposal.json')}")
    return 0


def cmd_generate(config: RunConfig) -> int:
    if config.seed is None:
        raise InputError("generate needs a seed (--seed or 'seed' in the config file)")
    scenario, name = _load_scenario(config)
    manager = FileManager()
    if config.scenario:
        manager.import_single_file(config.scenario)
    output_dir = manager.validate_output_directory(config.output_dir)
    for path in manager.check_file_conflicts(output_dir):
        logger.warning("Overwriting %s", path)
    if config.proposal:
        proposal = load_proposal(config.proposal, scenario)
    else:
        _, proposal = _make_proposal(scenario, config)
    schedule = config.schedule()
    params = config.params_for(proposal.pair)
    result = _generate_one(scenario, proposal, config, config.seed, params, schedule)
    generated = _with_generation_metadata(result, config, config.seed, name)

    scenario_path = os.path.join(output_dir, manager.generate_output_filename(name))
    save_scenario(generated, scenario_path)
    with open(os.path.join(output_dir, "proposal.json"), "w", encoding="utf-8") as f:
        f.write(render_proposal(proposal) + "\n")
    write_trace_csv(result.trace, os.path.join(output_dir, "trace.csv"))
    report = _report(generated, proposal, config, f"{name}_generated")
    write_metrics_csv([report], os.path.join(output_dir, "metrics.csv"))
    save_resolved(config, output_dir)
    if config.plot:
        stem = os.path.splitext(scenario_path)[0]
        for extension in (".svg", ".png"):
            render_scenario(generated, stem + extension, proposal.pair)

    ttc_text = "inf" if math.isinf(report.min_ttc) else f"{report.min_ttc:.2f}s"
    print(f"✓ Generated {scenario_path} (best reward {result.best_reward:.4f}, min TTC {ttc_text})")
    if result.collisions:
        print(f"✗ {len(result.collisions)} overlapping pair(s): "
              + ", ".join(f"{hit.agent_a}/{hit.agent_b} at step {hit.step}" for hit in result.collisions))
    return 0


def cmd_evaluate(config: RunConfig, directory: str, recursive: bool = False) -> int:
    manager = FileManager()
    if not os.path.isdir(directory):
        raise InputError(f"Not a directory: {directory}")
    manager.import_folder(directory, recursive=recursive)
    loaded, failures = manager.load_all()
    reports = []
    for path, scenario in loaded:
        scenario_id = os.path.splitext(os.path.basename(path))[0]
        try:
            proposal = _recorded_or_heuristic(scenario, config)
            reports.append(_report(scenario, proposal, config, scenario_id))
        except InputError as e:
            logger.warning("Skipping %s: %s", path, e)
            failures[path] = str(e)
    if not reports:
        raise InputError(f"No scenario in {directory} could be evaluated")

    # metrics.csv cannot clobber a scenario file
    output_dir = manager.validate_output_directory(config.output_dir, prevent_overwrite=False)
    write_metrics_csv(reports, os.path.join(output_dir, "metrics.csv"))
    print(",".join(CSV_COLUMNS))
    for report in reports:
        print(",".join(report.to_row()))
    if failures:
        print(f"✗ Skipped {len(failures)} file(s): {', '.join(sorted(os.path.basename(p) for p in failures))}")
    print(summary_line(reports, config.ttc_threshold))
    return 0


def _run_batch(scenario: Scenario, config: RunConfig, seeds: Sequence[int], schedule: DiffusionSchedule,
               proposal_for_seed, params_for, mode: Optional[GuidanceMode] = None,
               workers: Optional[int] = None) -> List[MetricsReport]:
    reports = []
    for seed in seeds:
        proposal = proposal_for_seed(seed)
        result = _generate_one(scenario, proposal, config, seed, params_for(proposal), schedule,
                               mode, workers)
        reports.append(_report(result.scenario, proposal, config, f"seed{seed}"))
    return reports


def _delta_pct(value: float, base: Optional[float]) -> Optional[float]:
    if base is None or math.isnan(base) or math.isnan(value) or base == 0:
        return None
    return 100.0 * (value - base) / abs(base)


def cmd_sweep(config: RunConfig) -> int:
    if not config.phis or not config.lambdas:
        raise InputError("sweep needs non-empty phi and lambda lists")
    scenario, _ = _load_scenario(config, default_fixture="merge")
    output_dir = ensure_output_directory(config.output_dir)
    _, proposal = _make_proposal(scenario, config)
    schedule = config.schedule()
    seeds = _seeds(config)
    cells = [(phi, lam) for phi in config.phis for lam in config.lambdas]
    cell_workers = config.workers if len(cells) > 1 else 1
    logger.info("Sweeping %d cells x %d seeds on pair %s/%s", len(cells), len(seeds), *proposal.pair)

    def run_cell(cell):
        phi, lam = cell
        try:
            social = SocialParams(lam, phi)
            params = {agent_id: social for agent_id in proposal.pair}
            reports = _run_batch(scenario, config, seeds, schedule, lambda seed: proposal,
                                 lambda p: params, workers=1 if cell_workers > 1 else None)
            return summarize(reports), ""
        except SocialGenError as e:
            logger.error("Cell phi=%.4f lambda=%.3f failed: %s", phi, lam, e)
            return None, e

    if cell_workers > 1:
        with ThreadPoolExecutor(max_workers=cell_workers) as pool:
            outcomes = list(pool.map(run_cell, cells))
    else:
        outcomes = [run_cell(cell) for cell in cells]

    base = None
    for (phi, lam), (summary, _) in zip(cells, outcomes):
        if summary is not None and abs(phi) < 1e-12 and abs(lam - 1.0) < 1e-12:
            base = summary
    rows = []
    for (phi, lam), (summary, error) in zip(cells, outcomes):
        if summary is None:
            rows.append([_fmt(phi), _fmt(lam), "0", "", "", "", "", "", "", "", str(error)])
            continue
        rows.append([
            _fmt(phi), _fmt(lam), str(summary.n), _fmt(summary.engagement_ratio),
            _fmt(summary.mean_max_accel), _fmt(summary.mean_extrinsic), _fmt(summary.mean_max_rel_vel),
            _fmt(_delta_pct(summary.engagement_ratio, base.engagement_ratio if base else None)),
            _fmt(_delta_pct(summary.mean_max_accel, base.mean_max_accel if base else None)),
            _fmt(_delta_pct(summary.mean_extrinsic, base.mean_extrinsic if base else None)),
            "",
        ])
    path = os.path.join(output_dir, "sweep.csv")
    _write_csv(path, SWEEP_COLUMNS, rows)
    save_resolved(config, output_dir)

    succeeded = [summary for summary, _ in outcomes if summary is not None]
    if not succeeded:
        raise next(error for _, error in outcomes if error)
    print(f"✓ Wrote {path} ({len(succeeded)}/{len(cells)} cells succeeded)")
    return 0


def cmd_ablate(config: RunConfig) -> int:
    scenario, _ = _load_scenario(config, default_fixture="merge")
    output_dir = ensure_output_directory(config.output_dir)
    schedule = config.schedule()
    seeds = _seeds(config)
    _, proposal = _make_proposal(scenario, config)
    if config.backend == ProposerBackend.SERVICE.value:
        _, single_stage = _make_proposal(scenario, config, single_stage=True)
    else:
        # without a chat service the single-stage variant falls back to the rule table
        single_stage = proposal

    def params_for(p: Proposal) -> Dict[str, SocialParams]:
        return config.params_for(p.pair)

    variants = [
        ("random-proposal", "random", GuidanceMode.STEPWISE,
         lambda seed: propose_random(scenario, seed)),
        ("single-stage", single_stage.backend, GuidanceMode.STEPWISE, lambda seed: single_stage),
        ("unguided", proposal.backend, GuidanceMode.UNGUIDED, lambda seed: proposal),
        ("terminal-only", proposal.backend, GuidanceMode.TERMINAL, lambda seed: proposal),
        ("full", proposal.backend, GuidanceMode.STEPWISE, lambda seed: proposal),
    ]
    rows = []
    for name, backend, mode, proposal_for_seed in variants:
        logger.info("Ablation variant %s (%s, %s)", name, backend, mode.value)
        try:
            summary = summarize(_run_batch(scenario, config, seeds, schedule, proposal_for_seed,
                                           params_for, mode))
        except SocialGenError as e:
            logger.error("Variant %s failed: %s", name, e)
            rows.append([name, backend, mode.value, "0", "", "", "", "", str(e)])
            continue
        rows.append([name, backend, mode.value, str(summary.n), _fmt(summary.engagement_ratio),
                     _fmt(summary.mean_max_rel_vel), _fmt(summary.mean_max_accel),
                     _fmt(summary.mean_extrinsic), ""])
        print(f"  {name:<16} engagement {summary.engagement_ratio:6.2f}%  "
              f"max rel vel {summary.mean_max_rel_vel:6.2f}  max accel {summary.mean_max_accel:6.2f}")
    path = os.path.join(output_dir, "ablation.csv")
    _write_csv(path, ABLATION_COLUMNS, rows)
    save_resolved(config, output_dir)
    print(f"✓ Wrote {path}")
    return 0


def cmd_fixture(name: str, output_dir: str) -> int:
    names = fixture_names() if name == "all" else [name]
    ensure_output_directory(output_dir)
    for fixture in names:
        path = os.path.join(output_dir, f"{fixture}.json")
        save_scenario(build_fixture(fixture), path)
        print(f"✓ Wrote {path}")
    return 0


def cmd_preset(args: argparse.Namespace) -> int:
    manager = PresetManager(args.presets_dir)
    if args.action == "list":
        for name in manager.get_preset_list():
            params = manager.load_preset(name)
            info = manager.get_preset_info(name)
            tag = "built-in" if info["builtin"] else "saved"
            print(f"  {name:<16} lambda={params.lam:.3f} phi={params.phi:+.4f}  [{tag}] {info['description']}")
        return 0
    if args.action == "save":
        if not args.name or args.lam is None or args.phi is None:
            raise InputError("preset save needs NAME, --lambda and --phi")
        if not manager.save_preset(args.name, SocialParams(args.lam, args.phi), args.description or ""):
            raise InputError(f"Could not save preset {args.name}")
        print(f"✓ Saved preset {args.name}")
        return 0
    if args.action == "export":
        if not args.name or not args.path:
            raise InputError("preset export needs NAME and PATH")
        if not manager.export_preset(args.name, args.path):
            raise InputError(f"Could not export preset {args.name}")
        print(f"✓ Exported {args.name} to {args.path}")
        return 0
    if not args.path:
        raise InputError("preset import needs PATH")
    imported = manager.import_preset(args.path)
    if imported is None:
        raise InputError(f"Could not import a preset from {args.path}")
    print(f"✓ Imported preset {imported}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-f", help="JSON run config file")
    common.add_argument("--scenario", help="scenario JSON file")
    common.add_argument("--backend", choices=[b.value for b in ProposerBackend])
    common.add_argument("--single-stage", action="store_true", default=None,
                        help="skip the scene description stage of the service proposer")
    common.add_argument("--preset", help="named social preset (see the preset command)")
    common.add_argument("--phi", type=parse_angle, help="social value orientation angle, e.g. pi/4")
    common.add_argument("--lambda", dest="lam", type=float, help="intrinsic reward scale")
    common.add_argument("--pop", dest="population", type=int, help="population size M")
    common.add_argument("--search-steps", type=int, help="outer search steps K")
    common.add_argument("--seed", type=int)
    common.add_argument("--terminal-only", action="store_true",
                        help="apply selection only at the last denoising step")
    common.add_argument("--joint-all", action="store_true", default=None,
                        help="regenerate every agent, not only the proposal pair")
    common.add_argument("--workers", type=int, help="threads for reward evaluation and sweep cells")
    common.add_argument("--out", dest="output_dir", help="output directory")
    common.add_argument("--plot", action="store_true", default=None, help="write an SVG and a PNG plot per scenario")
    common.add_argument("--verbose", "-v", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="socialgen",
                                     description="Social-aware driving scenario generation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("propose", parents=[common], help="propose an interacting pair and intents")
    sub.add_parser("generate", parents=[common], help="generate a scenario under guidance")
    evaluate = sub.add_parser("evaluate", parents=[common], help="compute metrics for a directory")
    evaluate.add_argument("directory")
    evaluate.add_argument("--recursive", "-r", action="store_true", help="include subdirectories")
    for name, text in (("sweep", "sweep social preferences"), ("ablate", "compare pipeline variants")):
        batch = sub.add_parser(name, parents=[common], help=text)
        batch.add_argument("--seeds", dest="n_seeds", type=int, help="number of seeds per cell")
        if name == "sweep":
            batch.add_argument("--phis", type=parse_angle_list, help="comma list, e.g. -pi/4,0,pi/4")
            batch.add_argument("--lambdas", type=parse_float_list, help="comma list, e.g. 0.3,0.5,1")
    fixture = sub.add_parser("fixture", help="write bundled synthetic scenarios")
    fixture.add_argument("name", choices=fixture_names() + ["all"])
    fixture.add_argument("--out", dest="output_dir", default="fixtures")
    fixture.add_argument("--verbose", "-v", action="store_true")
    preset = sub.add_parser("preset", help="manage social presets")
    preset.add_argument("action", choices=["list", "save", "export", "import"])
    preset.add_argument("name", nargs="?")
    preset.add_argument("path", nargs="?")
    preset.add_argument("--lambda", dest="lam", type=float)
    preset.add_argument("--phi", type=parse_angle)
    preset.add_argument("--description")
    preset.add_argument("--presets-dir", default="presets")
    preset.add_argument("--verbose", "-v", action="store_true")
    return parser


OVERRIDE_FIELDS = ("scenario", "backend", "single_stage", "preset", "phi", "lam", "population",
                   "search_steps", "seed", "joint_all", "workers", "output_dir", "plot",
                   "n_seeds", "phis", "lambdas")


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {name: getattr(args, name, None) for name in OVERRIDE_FIELDS}
    if getattr(args, "terminal_only", False):
        overrides["mode"] = GuidanceMode.TERMINAL.value
    return overrides


def run(args: argparse.Namespace) -> int:
    if args.command == "fixture":
        return cmd_fixture(args.name, args.output_dir)
    if args.command == "preset":
        return cmd_preset(args)
    config = resolve_run_config(args.config, overrides_from_args(args))
    setup_logging(config.output_dir, logging.DEBUG if args.verbose else logging.INFO)
    logger.debug("Effective config: %s", json.dumps(config.__dict__, default=str))
    if args.command == "propose":
        return cmd_propose(config)
    if args.command == "generate":
        return cmd_generate(config)
    if args.command == "evaluate":
        return cmd_evaluate(config, args.directory, args.recursive)
    if args.command == "sweep":
        return cmd_sweep(config)
    return cmd_ablate(config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("fixture", "preset"):
        setup_logging(None, logging.DEBUG if args.verbose else logging.INFO)
    try:
        return run(args)
    except SocialGenError as e:
        logger.error("%s", e)
        if e.fragment:
            logger.debug("Offending fragment: %r", e.fragment)
        print(f"✗ {e}", file=sys.stderr)
        return e.exit_code
    finally:
        shutdown_logging()


if __name__ == "__main__":
    sys.exit(main())
