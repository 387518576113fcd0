"""
Tests for the scenario data model: JSON loading, validation, derived
kinematics and lane projection
"""

import json
import math
import os
import sys
import tempfile

import numpy as np

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from errors import ParseError, ValidationError
from fixtures import build_fixture, constant_velocity, straight_lane
from scenario import (Lane, LaneMap, Scenario, Trajectory, derive_kinematics, load_scenario,
                      normalize_angle, project_onto_lane, project_to_lane, save_scenario,
                      scenario_to_dict, trajectory_from_positions, validate_scenario)


def _write_json(data, directory, name="scenario.json"):
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f)
    return path


def test_fixture_round_trip():
    """Saved fixture reloads with the same shape and values"""
    print("Testing scenario file round trip...")
    scenario = build_fixture("straight")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "straight.json")
        save_scenario(scenario, path)
        loaded = load_scenario(path)

    assert len(loaded.trajectories) == 2
    assert loaded.n_steps == 60
    assert math.isclose(loaded.dt, 0.1)
    assert loaded.agent_ids == ["a", "b"]
    assert np.allclose(loaded.trajectory("b").positions, scenario.trajectory("b").positions)
    assert loaded.map.lane("L0") is not None
    print("     ✓ Two agents, 60 steps, dt 0.1")


def test_duplicate_agent_rejected():
    print("Testing duplicate agent ids...")
    data = scenario_to_dict(build_fixture("straight"))
    data["agents"][1]["id"] = data["agents"][0]["id"]
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_json(data, tmp)
        try:
            load_scenario(path)
        except ValidationError as e:
            assert e.agent_id == "a"
            print("     ✓ ValidationError raised")
            return
    raise AssertionError("duplicate agent id was accepted")


def test_teleport_rejected():
    """A 10 m jump in one 0.1 s step at 5 m/s breaks the consistency bound"""
    print("Testing kinematic consistency bound...")
    positions = np.array([[0.0, 0.0], [0.5, 0.0], [10.5, 0.0], [11.0, 0.0]])
    traj = Trajectory("x", positions, np.full(4, 5.0), np.zeros(4), 0.1)
    scenario = Scenario((traj,), LaneMap(()), {})
    try:
        validate_scenario(scenario)
    except ValidationError as e:
        assert e.agent_id == "x"
        assert e.step == 2
        print("     ✓ Teleport flagged at step 2")
        return
    raise AssertionError("teleport was accepted")


def test_malformed_files():
    print("Testing malformed scenario files...")
    with tempfile.TemporaryDirectory() as tmp:
        broken = os.path.join(tmp, "broken.json")
        with open(broken, "w", encoding="utf-8") as f:
            f.write("{not json")
        # a directory is as unreadable as a missing file
        for path in (broken, os.path.join(tmp, "missing.json"), tmp):
            try:
                load_scenario(path)
                raise AssertionError(f"{path} loaded")
            except ParseError:
                pass

        data = scenario_to_dict(build_fixture("straight"))
        data["agents"][0]["states"][3] = [0.0, 0.0, 1.0]
        try:
            load_scenario(_write_json(data, tmp, "short_row.json"))
            raise AssertionError("short state row accepted")
        except ParseError:
            pass

        data = scenario_to_dict(build_fixture("straight"))
        data["agents"][0]["states"][5][2] = -1.0
        try:
            load_scenario(_write_json(data, tmp, "negative.json"))
            raise AssertionError("negative speed accepted")
        except ValidationError as e:
            assert e.step == 5
    print("     ✓ ParseError and ValidationError where expected")


def test_lane_map_validation():
    print("Testing lane map validation...")
    traj = constant_velocity("a", (0.0, 0.0), 5.0, 0.0, n_steps=5)
    bad_maps = [
        LaneMap((Lane("L0", [[0, 0], [10, 0]], 3.5, 10.0, ("nowhere",)),)),
        LaneMap((Lane("L0", [[0, 0], [10, 0]], 0.0, 10.0),)),
        LaneMap((Lane("L0", [[0, 0]], 3.5, 10.0),)),
        LaneMap((Lane("L0", [[0, 0], [10, 0]], 3.5, 10.0), Lane("L0", [[0, 5], [10, 5]], 3.5, 10.0))),
    ]
    for lane_map in bad_maps:
        try:
            validate_scenario(Scenario((traj,), lane_map, {}))
            raise AssertionError("invalid lane map accepted")
        except ValidationError:
            pass
    print("     ✓ Dangling successor, zero width, short centerline and duplicate id rejected")


def test_normalize_angle():
    print("Testing heading normalization...")
    assert normalize_angle(math.pi) == math.pi
    assert normalize_angle(-math.pi) == math.pi
    assert math.isclose(normalize_angle(3 * math.pi / 2), -math.pi / 2)
    wrapped = normalize_angle(np.array([0.0, 2 * math.pi + 0.1]))
    assert np.allclose(wrapped, [0.0, 0.1])
    print("     ✓ Angles wrapped into (-pi, pi]")


def test_kinematics():
    print("Testing derived kinematics...")

    print("  1. Constant velocity...")
    profile = derive_kinematics(constant_velocity("a", (0.0, 0.0), 10.0, 0.0, n_steps=20))
    assert np.allclose(profile.acceleration, 0.0, atol=1e-9)
    assert np.allclose(profile.velocity, [10.0, 0.0])
    print("     ✓ Zero acceleration")

    print("  2. Quadratic positions...")
    dt, accel = 0.1, 2.0
    t = np.arange(30) * dt
    positions = np.stack([0.5 * accel * t ** 2, np.zeros_like(t)], axis=1)
    traj = Trajectory("q", positions, accel * t, np.zeros_like(t), dt)
    profile = derive_kinematics(traj)
    # interior points where the second central difference is exact
    assert np.allclose(profile.acceleration[2:-2, 0], accel, atol=1e-9)
    assert np.allclose(profile.acceleration[2:-2, 1], 0.0, atol=1e-9)
    print("     ✓ Interior acceleration equals 2 m/s^2")

    print("  3. Length-2 trajectory...")
    short = Trajectory("s", [[0.0, 0.0], [1.0, 0.0]], [10.0, 10.0], [0.0, 0.0], 0.1)
    profile = derive_kinematics(short)
    for arr in (profile.velocity, profile.acceleration, profile.jerk):
        assert arr.shape == (2, 2)
        assert np.all(np.isfinite(arr))
    print("     ✓ One-sided differences stay finite")


def test_lane_projection():
    print("Testing lane projection...")
    lane = straight_lane("L0", (0.0, 0.0), (100.0, 0.0))
    lane_map = LaneMap((lane,))

    on_vertex = project_to_lane((0.0, 0.0), lane_map)
    assert on_vertex.lateral_offset == 0.0
    assert on_vertex.lane_id == "L0"

    left = project_to_lane((30.0, 1.5), lane_map)
    assert math.isclose(left.lateral_offset, 1.5)
    assert math.isclose(left.tangent_heading, 0.0)
    assert math.isclose(left.arc_length, 30.0)

    right = project_to_lane((30.0, -2.0), lane_map)
    assert math.isclose(right.lateral_offset, -2.0)
    print("     ✓ Signed lateral offset and tangent heading")

    tie_map = LaneMap((straight_lane("L1", (0.0, 2.0), (100.0, 2.0)),
                       straight_lane("L0", (0.0, -2.0), (100.0, -2.0))))
    assert project_to_lane((50.0, 0.0), tie_map).lane_id == "L0"
    print("     ✓ Ties go to the lowest lane id")


def test_projection_matches_dense_sampling():
    """Projection distance equals the brute-force distance to a densely sampled polyline"""
    print("Testing projection against dense sampling...")
    rng = np.random.default_rng(7)
    centerline = np.array([[0.0, 0.0], [20.0, 5.0], [35.0, -10.0], [60.0, -10.0]])
    lane = Lane("curvy", centerline, 3.5, 10.0)
    samples = []
    for start, end in zip(centerline[:-1], centerline[1:]):
        s = np.linspace(0.0, 1.0, 200001)[:, None]
        samples.append(start + s * (end - start))
    dense = np.concatenate(samples)
    points = rng.uniform([-5.0, -20.0], [65.0, 15.0], size=(25, 2))
    projections = project_onto_lane(points, lane)
    for point, lateral in zip(points, projections.lateral_offset):
        brute = np.min(np.linalg.norm(dense - point, axis=1))
        assert abs(abs(lateral) - brute) < 1e-3, (point, lateral, brute)
    print("     ✓ 25 random points agree")


def test_trajectory_from_positions():
    print("Testing trajectory reconstruction from positions...")
    positions = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 2.0]])
    traj = trajectory_from_positions("g", positions, 0.1, fallback_heading=0.3)
    validate_scenario(Scenario((traj,), LaneMap(()), {}))
    assert math.isclose(traj.speeds[0], 10.0)
    assert math.isclose(traj.speeds[4], 20.0)
    assert math.isclose(traj.headings[2], traj.headings[1])
    print("     ✓ Speeds satisfy the consistency bound, headings carried while stopped")


def main():
    """Run all scenario tests"""
    print("=== Scenario Model Tests ===\n")

    tests = [
        ("Fixture Round Trip", test_fixture_round_trip),
        ("Duplicate Agent", test_duplicate_agent_rejected),
        ("Consistency Bound", test_teleport_rejected),
        ("Malformed Files", test_malformed_files),
        ("Lane Map Validation", test_lane_map_validation),
        ("Angle Normalization", test_normalize_angle),
        ("Kinematics", test_kinematics),
        ("Lane Projection", test_lane_projection),
        ("Projection Oracle", test_projection_matches_dense_sampling),
        ("Reconstruction", test_trajectory_from_positions),
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
