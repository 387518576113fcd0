"""
Tests for evolutionary guidance: temperature annealing, elite selection,
the guided reverse chain and scenario-level generation
"""

import csv
import math
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np
from scipy.stats import chisquare

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from diffusion_core import GaussianPriorDenoiser, TrajectoryTensor, make_schedule
from errors import ConfigError, InputError, NonFiniteReward
from es_guidance import (TRACE_COLUMNS, EliteDistribution, GuidanceConfig, GuidanceMode, Population,
                         build_conditioning, decode, elite_distribution, generation_intents,
                         guided_sample, resample_elites, run_guidance, temperature, write_trace_csv)
from fixtures import build_fixture
from metrics import engagement_ratio, evaluate_scenario, find_collisions
from proposer import IntentKind, describe_scene, propose_heuristic, select_pair
from scenario import validate_scenario
from social_reward import SocialParams, extrinsic_pair

N_STEPS = 8


def _toy_setup(mask=None):
    t = np.arange(N_STEPS)
    mean = np.stack([2.0 * t, np.zeros(N_STEPS)], axis=1).ravel()
    mask = np.zeros(mean.size, dtype=bool) if mask is None else mask
    template = TrajectoryTensor(mean, mask, mean, 1, N_STEPS)
    denoiser = GaussianPriorDenoiser.for_tensor(template, mean, smoothness=5.0, ridge=0.5)
    return template, denoiser, mean


def _toy_reward(target):
    return lambda values: -float(np.sum((values - target) ** 2))


def _toy_config(**overrides):
    base = dict(population=16, search_steps=2, seed=0)
    base.update(overrides)
    return GuidanceConfig(**base)


def test_temperature():
    print("Testing temperature annealing...")
    schedule = make_schedule(50)
    assert temperature(50, schedule, 1.0, 50.0) == 1.0
    assert temperature(0, schedule, 1.0, 50.0) == 50.0
    assert math.isclose(temperature(25, schedule, 1.0, 50.0), 25.5)
    try:
        temperature(51, schedule, 1.0, 50.0)
        raise AssertionError("timestep past T accepted")
    except InputError:
        pass
    print("     ✓ tau_low at t=T, tau_high at t=0, 25.5 halfway")


def test_elite_distribution():
    print("Testing elite distribution...")
    assert np.allclose(elite_distribution([0.3] * 5, 10.0).weights, 0.2)
    assert np.allclose(elite_distribution([1.0, -4.0, 2.5], 0.0).weights, 1.0 / 3.0)
    q = elite_distribution([1.0, 0.0], math.log(3.0))
    assert np.allclose(q.weights, [0.75, 0.25])
    print("     ✓ Uniform for equal rewards and tau = 0, [0.75, 0.25] at tau = ln 3")

    extreme = elite_distribution([1e6, 0.0, -1e6], 50.0)
    assert np.all(np.isfinite(extreme.weights)) and math.isclose(extreme.weights.sum(), 1.0)
    assert math.isclose(elite_distribution([0.0] * 4, 1.0).entropy, math.log(4.0))

    try:
        elite_distribution([1.0, float("nan")], 1.0)
        raise AssertionError("NaN reward accepted")
    except NonFiniteReward as e:
        assert e.exit_code == 4
    try:
        elite_distribution([1.0, 0.0], -1.0)
        raise AssertionError("negative gain accepted")
    except InputError:
        pass
    print("     ✓ Stable for extreme rewards, NaN and negative gain rejected")


def test_elite_weights_properties():
    print("Testing elite weight properties on random rewards...")
    rng = np.random.default_rng(17)
    for _ in range(10000):
        n = int(rng.integers(2, 65))
        scale = 10.0 ** rng.uniform(-3, 3)
        q = elite_distribution(rng.normal(0.0, scale, n), rng.uniform(0.0, 50.0))
        assert np.all(q.weights >= 0)
        assert abs(q.weights.sum() - 1.0) <= 1e-12
    print("     ✓ Weights are a probability vector for 10^4 random reward vectors")

    taus = np.linspace(0.0, 50.0, 26)
    schedule = make_schedule(50)
    for _ in range(200):
        rewards = rng.normal(0.0, 1.0, int(rng.integers(2, 33)))
        entropies = [elite_distribution(rewards, tau).entropy for tau in taus]
        assert all(b <= a + 1e-12 for a, b in zip(entropies, entropies[1:]))
        late = elite_distribution(rewards, temperature(1, schedule, 1.0, 50.0)).entropy
        early = elite_distribution(rewards, temperature(50, schedule, 1.0, 50.0)).entropy
        assert late <= early + 1e-12
    print("     ✓ Entropy never rises with the gain, so q at t=1 is no flatter than at t=T")


def test_resample_elites():
    print("Testing elite resampling...")
    members = np.arange(20.0).reshape(5, 4)
    pop = Population(members, np.arange(5.0), t=3)

    point = np.zeros(5)
    point[3] = 1.0
    picked = resample_elites(pop, EliteDistribution(point), np.random.default_rng(0))
    assert np.array_equal(picked.members, np.tile(members[3], (5, 1)))
    assert np.all(picked.parents == 3)
    assert picked.t == 3
    print("     ✓ Point mass copies one member")

    uniform = EliteDistribution(np.full(5, 0.2))
    rng = np.random.default_rng(2024)
    counts = np.zeros(5)
    for _ in range(2000):
        counts += np.bincount(resample_elites(pop, uniform, rng).parents, minlength=5)
    draws = counts.sum()
    assert draws == 10000
    sigma = math.sqrt(draws * 0.2 * 0.8)
    assert np.all(np.abs(counts - draws * 0.2) < 4 * sigma)
    assert chisquare(counts).pvalue > 1e-3
    print("     ✓ Uniform selection frequencies over 10^4 draws")

    first = resample_elites(pop, uniform, np.random.default_rng(5)).parents
    second = resample_elites(pop, uniform, np.random.default_rng(5)).parents
    assert np.array_equal(first, second)

    try:
        Population(members[:1], np.zeros(1), t=1)
        raise AssertionError("single-member population accepted")
    except InputError:
        pass
    print("     ✓ Deterministic under a fixed seed")


def test_config_validation():
    print("Testing guidance config...")
    bad = [dict(population=1), dict(search_steps=0), dict(tau_low=5.0, tau_high=1.0),
           dict(renoise_fraction=0.0), dict(seed=-1), dict(workers=0), dict(conditioned_steps=0)]
    for kwargs in bad:
        try:
            GuidanceConfig(**kwargs)
            raise AssertionError(f"{kwargs} accepted")
        except ConfigError:
            pass
    assert GuidanceConfig(mode="terminal").mode == GuidanceMode.TERMINAL
    assert GuidanceConfig().to_dict()["mode"] == "stepwise"
    print("     ✓ Invalid settings raise ConfigError")


def test_guidance_beats_unguided():
    """Archived best reward beats the best of M unguided samples in at least 90% of seeds"""
    print("Testing guided search against unguided sampling...")
    schedule = make_schedule(50, 1e-3, 0.3)
    template, denoiser, mean = _toy_setup()
    target = mean + 1.0
    reward = _toy_reward(target)

    wins = 0
    for seed in range(20):
        guided = run_guidance(template, reward, _toy_config(seed=seed), denoiser, schedule)
        unguided = run_guidance(template, reward,
                                _toy_config(seed=seed, search_steps=1, mode=GuidanceMode.UNGUIDED),
                                denoiser, schedule)
        wins += guided.best_reward > unguided.best_reward
    assert wins >= 18, wins
    print(f"     ✓ Guided search won {wins}/20 seeds")


def test_trace_properties():
    print("Testing trace and archive properties...")
    schedule = make_schedule(10, 1e-3, 0.3)
    template, denoiser, mean = _toy_setup()
    reward = _toy_reward(mean + 0.5)
    config = _toy_config(renoise_fraction=0.5, seed=7)

    outcome = run_guidance(template, reward, config, denoiser, schedule)
    best = [row.best_reward for row in outcome.trace]
    assert all(b >= a for a, b in zip(best, best[1:]))
    assert outcome.best_reward == best[-1]
    assert math.isclose(reward(outcome.best_values), outcome.best_reward)
    print("     ✓ Best-so-far never decreases and matches the archived sample")

    assert len(outcome.trace) == 10 + 5
    assert [row.t for row in outcome.trace[9:11]] == [1, 5]
    assert outcome.trace[10].step_k == 2
    print("     ✓ Second search step restarts from t = ceil(0.5 T)")

    again = run_guidance(template, reward, config, denoiser, schedule)
    assert np.array_equal(outcome.best_values, again.best_values)
    assert [r.to_row() for r in outcome.trace] == [r.to_row() for r in again.trace]
    threaded = run_guidance(template, reward, replace(config, workers=4), denoiser, schedule)
    assert np.array_equal(outcome.best_values, threaded.best_values)
    print("     ✓ Bit-identical across runs and worker counts")

    terminal = run_guidance(template, reward, replace(config, mode=GuidanceMode.TERMINAL),
                            denoiser, schedule)
    assert [row.t for row in terminal.trace] == [1, 1]
    flat = run_guidance(template, lambda values: 1.0, config, denoiser, schedule)
    assert all(math.isclose(row.entropy_q, math.log(16)) for row in flat.trace)
    print("     ✓ Terminal-only selection and uniform weights under a constant reward")


def test_masked_entries_preserved():
    print("Testing clamped entries during guidance...")
    schedule = make_schedule(10, 1e-3, 0.3)
    mask = np.zeros(2 * N_STEPS, dtype=bool)
    mask[:6] = True
    template, denoiser, mean = _toy_setup(mask)
    outcome = run_guidance(template, _toy_reward(mean - 3.0), _toy_config(), denoiser, schedule)
    assert np.array_equal(outcome.best_values[:6], mean[:6])
    assert np.all(outcome.population.members[:, :6] == mean[:6])
    print("     ✓ Observed prefix never moves")


def test_scenario_generation():
    print("Testing scenario-level guided sampling...")
    scenario = build_fixture("merge")
    desc = describe_scene(scenario)
    proposal = propose_heuristic(scenario, desc, select_pair(desc))
    assert proposal.intent_i.kind == IntentKind.LANE_CHANGE_RIGHT

    config = GuidanceConfig(population=4, search_steps=1, seed=3, conditioned_steps=10)
    schedule = make_schedule(5)
    params = {"i": SocialParams(1.0, 0.4), "j": SocialParams(1.0, -0.2)}
    result = guided_sample(scenario, proposal, params, config, schedule)

    validate_scenario(result.scenario)
    assert result.generated_ids == ("i", "j")
    assert result.scenario.n_steps == scenario.n_steps
    assert np.array_equal(result.scenario.trajectory("k").positions,
                          scenario.trajectory("k").positions)
    for agent_id in ("i", "j"):
        assert np.allclose(result.scenario.trajectory(agent_id).positions[:10],
                           scenario.trajectory(agent_id).positions[:10])
    assert len(result.trace) == 5
    assert result.params["j"] == SocialParams(1.0, -0.2)
    print("     ✓ Pair regenerated, context agent and observed prefix untouched")

    assert list(result.collisions) == find_collisions(result.scenario, 2.0, ("i", "j"))
    assert all("i" in (hit.agent_a, hit.agent_b) or "j" in (hit.agent_a, hit.agent_b)
               for hit in result.collisions)
    print(f"     ✓ {len(result.collisions)} disc overlap(s) reported for the generated pair")

    generated, intents = generation_intents(scenario, proposal, joint_all=True)
    assert generated == ("i", "j", "k")
    assert intents["k"].target_speed == 10.0

    template, mean = build_conditioning(scenario, ("i", "j"), 10)
    assert int(template.mask.sum()) == 2 * (60 + 2 * 10)
    replay = decode(mean, template, scenario, ("i", "j"))
    validate_scenario(replay)
    print("     ✓ Joint-all intents and conditioning mask")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "trace.csv")
        write_trace_csv(result.trace, path)
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    assert rows[0] == TRACE_COLUMNS
    assert len(rows) == 6


MERGE_SEEDS = range(30)


def _merge_batch(params, mode=GuidanceMode.STEPWISE):
    """Generate the merge pair once per seed and score each result"""
    scenario = build_fixture("merge")
    desc = describe_scene(scenario)
    proposal = propose_heuristic(scenario, desc, select_pair(desc))
    schedule = make_schedule(10)
    reports = []
    for seed in MERGE_SEEDS:
        config = GuidanceConfig(population=8, search_steps=1, seed=seed, conditioned_steps=10, mode=mode)
        result = guided_sample(scenario, proposal, {"i": params, "j": params}, config, schedule)
        extrinsic = extrinsic_pair(result.scenario, proposal.pair, proposal.intents)
        reports.append(evaluate_scenario(result.scenario, proposal.pair, extrinsic))
    return reports


def _standard_error(values):
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def test_stepwise_engagement():
    print("Testing step-wise against terminal-only guidance on merge...")
    stepwise = engagement_ratio(_merge_batch(SocialParams(1.0, 0.0)))
    terminal = engagement_ratio(_merge_batch(SocialParams(1.0, 0.0), GuidanceMode.TERMINAL))
    assert stepwise >= terminal, (stepwise, terminal)
    print(f"     ✓ Engagement {stepwise:.2f}% step-wise vs {terminal:.2f}% terminal-only")


def test_social_trends():
    print("Testing social preference trends on merge...")
    engaged = {}
    for phi in (-math.pi / 4, 0.0, math.pi / 4):
        engaged[phi] = [float(r.engaged) for r in _merge_batch(SocialParams(1.0, phi))]
    order = [-math.pi / 4, 0.0, math.pi / 4]
    for low, high in zip(order, order[1:]):
        tolerance = max(_standard_error(engaged[low]), _standard_error(engaged[high]))
        assert np.mean(engaged[low]) >= np.mean(engaged[high]) - tolerance, (low, high)
    ratios = ", ".join(f"{100.0 * np.mean(engaged[phi]):.1f}%" for phi in order)
    print(f"     ✓ Engagement over phi = -pi/4, 0, pi/4: {ratios}")

    extrinsic = {}
    for lam in (1.0, 0.5, 0.3):
        reports = _merge_batch(SocialParams(lam, 0.0))
        extrinsic[lam] = [(r.extrinsic_reward_i + r.extrinsic_reward_j) / 2.0 for r in reports]
    means = {lam: float(np.mean(values)) for lam, values in extrinsic.items()}
    assert means[0.3] > means[1.0], means
    for high, low in ((1.0, 0.5), (0.5, 0.3)):
        tolerance = max(_standard_error(extrinsic[high]), _standard_error(extrinsic[low]))
        assert means[low] >= means[high] - tolerance, (high, low, means)
    print(f"     ✓ Mean extrinsic reward {means[1.0]:.3f} -> {means[0.5]:.3f} -> {means[0.3]:.3f} "
          f"as lambda falls 1.0 -> 0.5 -> 0.3")


def main():
    """Run all guidance tests"""
    print("=== Evolutionary Guidance Tests ===\n")

    tests = [
        ("Temperature", test_temperature),
        ("Elite Distribution", test_elite_distribution),
        ("Elite Weight Properties", test_elite_weights_properties),
        ("Resample Elites", test_resample_elites),
        ("Config Validation", test_config_validation),
        ("Guided vs Unguided", test_guidance_beats_unguided),
        ("Trace Properties", test_trace_properties),
        ("Clamped Entries", test_masked_entries_preserved),
        ("Scenario Generation", test_scenario_generation),
        ("Step-wise Engagement", test_stepwise_engagement),
        ("Social Trends", test_social_trends),
    ]

    passed = 0
    for test_name, test_func in tests:
        print(f"\n--- {test_name} ---")
        try:
            test_func()
            passed += 1
            print(f"✓ {test_name} PASSED")
        except Exception as e:
            print(f"✗ {test_name} FAILED: {e}")

    print(f"\n=== RESULTS ===")
    print(f"Passed: {passed}/{len(tests)}")
    return passed == len(tests)


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
