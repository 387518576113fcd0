"""
Tests for the two-stage proposer: scene description, pair selection, the
heuristic rule table, reply parsing and the chat-service backend
"""

import json
import math
import os
import sys
import tempfile

import numpy as np

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from errors import (InputError, InsufficientAgents, NoJsonFound, ProposalReferenceError,
                    SchemaError, SelfPairError)
from fixtures import build_fixture, constant_velocity, fixture_names, straight_lane
from llm_gateway import ChatGateway, GatewayConfig
from proposer import (Intent, IntentKind, PairFeatures, ProposerBackend, ProposerConfig,
                      describe_scene, extract_json_object, interaction_potential, load_proposal,
                      parse_proposal_text, propose, propose_heuristic, propose_random,
                      render_proposal, select_pair)
from scenario import LaneMap, Scenario
from stub_server import ScriptedReply, StubChatServer

VALID_REPLY = ('Sure. Here is my proposal:\n```json\n'
               '{"agent_i": "j", "agent_j": "i", '
               '"intent_i": {"kind": "MaintainSpeed", "target_speed": 12.5}, '
               '"intent_j": {"kind": "Yield", "yield_to": "j"}, '
               '"rationale": "j {speeds} up"}\n```\nGood luck!')


def _heuristic(name):
    scenario = build_fixture(name)
    desc = describe_scene(scenario)
    return scenario, desc, propose_heuristic(scenario, desc, select_pair(desc))


def _quiet_gateway(base_url, max_retries=0):
    return ChatGateway(GatewayConfig(base_url=base_url, max_retries=max_retries, timeout=5.0),
                       sleep=lambda _: None)


def test_scene_description():
    print("Testing scene description...")
    head_on = Scenario((constant_velocity("a", (0.0, 0.0), 10.0, 0.0),
                        constant_velocity("b", (40.0, 0.0), 10.0, math.pi)), LaneMap(()), {})
    features = describe_scene(head_on).pair("a", "b")
    assert math.isclose(features.closing_speed, 20.0)
    assert features.min_distance < 1e-9
    assert math.isclose(features.min_ttc, 1.8)
    print("     ✓ Head-on pair closes at 20 m/s down to 0 m")

    lone = Scenario((constant_velocity("solo", (0.0, 0.0), 5.0, 0.0),), LaneMap(()), {})
    desc = describe_scene(lone)
    assert desc.pairs == () and len(desc.agents) == 1
    assert "off the lane map" in desc.rendered_text
    print("     ✓ Single agent: summary but no pairs")

    lanes = LaneMap((straight_lane("L0", (-10.0, 0.0), (200.0, 0.0)),
                     straight_lane("L1", (-10.0, 3.5), (200.0, 3.5))))
    parallel = Scenario((constant_velocity("a", (0.0, 0.0), 10.0, 0.0),
                         constant_velocity("b", (0.0, 3.5), 10.0, 0.0)), lanes, {})
    features = describe_scene(parallel).pair("a", "b")
    assert features.closing_speed == 0.0 and not features.path_crossing
    assert describe_scene(parallel).agent("b").lane_id == "L1"
    print("     ✓ Parallel agents neither close nor cross")

    follower = Scenario((constant_velocity("a", (0.0, 0.0), 12.0, 0.0),
                         constant_velocity("b", (25.0, 0.0), 8.0, 0.0)), lanes, {})
    features = describe_scene(follower).pair("a", "b")
    assert features.closing_speed > 0 and not features.path_crossing
    merge_desc = describe_scene(build_fixture("merge"))
    assert not merge_desc.pair("j", "k").path_crossing
    assert describe_scene(build_fixture("crossing")).pair("a", "b").path_crossing
    print("     ✓ Agents sharing a lane follow, they do not cross")

    try:
        describe_scene(parallel, horizon=0.0)
        raise AssertionError("zero horizon accepted")
    except InputError:
        pass


def test_pair_selection():
    print("Testing pair selection...")
    converging = PairFeatures("a", "b", 20.0, 5.0, 5.0, 0.5, 2.0, False, 3.0)
    diverging = PairFeatures("a", "c", 20.0, 5.0, -5.0, 30.0, 0.0, False, math.inf)
    assert interaction_potential(converging) > interaction_potential(diverging)
    print("     ✓ Converging pair outranks a diverging one")

    merge_desc = describe_scene(build_fixture("merge"))
    assert select_pair(merge_desc) == ("i", "j")
    assert select_pair(merge_desc, (0.0, 0.0, 0.0)) == ("i", "j")
    three = Scenario(tuple(constant_velocity(n, (x, 50.0 * x), 0.0, 0.0, n_steps=3)
                           for n, x in (("c", 0.0), ("a", 1.0), ("b", 2.0))), LaneMap(()), {})
    assert select_pair(describe_scene(three), (0.0, 0.0, 0.0)) == ("a", "b")
    print("     ✓ Ties go to the lexicographically smallest pair")

    lone = Scenario((constant_velocity("solo", (0.0, 0.0), 5.0, 0.0),), LaneMap(()), {})
    try:
        select_pair(describe_scene(lone))
        raise AssertionError("single agent accepted")
    except InsufficientAgents:
        pass


def test_heuristic_rules():
    print("Testing heuristic rule table...")

    print("  1. Adjacent-lane converging...")
    _, _, proposal = _heuristic("merge")
    assert proposal.pair == ("i", "j")
    assert proposal.intent_i == Intent(IntentKind.LANE_CHANGE_RIGHT, target_lane_id="L0")
    assert proposal.intent_j == Intent(IntentKind.MAINTAIN_SPEED, target_speed=10.0)
    assert "adjacent-lane" in proposal.rationale
    print("     ✓ Left-lane agent changes right into j's lane")

    print("  2. Crossing paths...")
    _, _, proposal = _heuristic("crossing")
    assert proposal.pair == ("b", "a")
    assert proposal.intent_i.kind == IntentKind.REACH_POINT
    assert np.allclose(proposal.intent_i.goal, (0.0, 10.0))
    assert proposal.intent_j == Intent(IntentKind.YIELD, yield_to="b")
    print("     ✓ Earlier arrival drives through, the other yields")

    print("  3. Same-lane follower...")
    _, _, proposal = _heuristic("straight")
    assert proposal.pair == ("a", "b")
    assert proposal.intent_i.kind == IntentKind.REACH_POINT
    assert proposal.intent_i.goal[0] > 25.0
    assert proposal.intent_j.target_speed == 8.0
    print("     ✓ Follower pushes ahead of the leader")

    print("  4. Fallback...")
    _, _, proposal = _heuristic("headon")
    assert proposal.rationale == "fallback"
    assert proposal.intent_i.kind == proposal.intent_j.kind == IntentKind.MAINTAIN_SPEED
    print("     ✓ Unmatched geometry falls back to MaintainSpeed for both")

    first = render_proposal(_heuristic("merge")[2])
    os.environ["SOCIALGEN_API_KEY"] = "irrelevant"
    try:
        assert render_proposal(_heuristic("merge")[2]) == first
    finally:
        del os.environ["SOCIALGEN_API_KEY"]
    print("     ✓ Heuristic output does not depend on the environment")


def test_random_backend():
    print("Testing random proposal baseline...")
    scenario = build_fixture("merge")
    one, two = propose_random(scenario, 5), propose_random(scenario, 5)
    assert render_proposal(one) == render_proposal(two)
    assert one.agent_i != one.agent_j and one.backend == "random"
    seen = set()
    for seed in range(30):
        proposal = propose_random(scenario, seed)
        for intent in (proposal.intent_i, proposal.intent_j):
            intent.check_references(scenario)
            seen.add(intent.kind)
    assert len(seen) >= 4
    print("     ✓ Seeded, valid and varied")


def test_json_extraction():
    print("Testing JSON extraction...")
    data, fragment = extract_json_object(VALID_REPLY)
    assert data["agent_i"] == "j" and fragment.startswith("{") and fragment.endswith("}")
    assert data["rationale"] == "j {speeds} up"

    data, _ = extract_json_object('noise {not json} then {"a": {"b": "}"}} tail')
    assert data == {"a": {"b": "}"}}
    for text in ("no braces at all", "[1, 2, 3]", '{"unterminated": '):
        try:
            extract_json_object(text)
            raise AssertionError(f"{text!r} produced an object")
        except NoJsonFound:
            pass
    print("     ✓ First balanced object, braces inside strings ignored")


def test_reply_parsing():
    print("Testing reply validation...")
    scenario = build_fixture("merge")
    proposal = parse_proposal_text(VALID_REPLY, scenario)
    assert proposal.pair == ("j", "i")
    assert proposal.intent_i.target_speed == 12.5
    assert proposal.backend == "service"

    base = json.loads(extract_json_object(VALID_REPLY)[1])
    cases = [
        (dict(base, intent_i={"kind": "Teleport"}), SchemaError),
        (dict(base, intent_i={"kind": "MaintainSpeed"}), SchemaError),
        (dict(base, intent_j={"kind": "ReachPoint", "goal": [1.0]}), SchemaError),
        (dict(base, agent_j="j"), SelfPairError),
        (dict(base, agent_i="ghost"), ProposalReferenceError),
        (dict(base, intent_i={"kind": "LaneChangeLeft", "target_lane_id": "L9"}), ProposalReferenceError),
        (dict(base, intent_j={"kind": "Yield", "yield_to": "nobody"}), ProposalReferenceError),
        ({k: v for k, v in base.items() if k != "intent_j"}, SchemaError),
    ]
    for data, expected in cases:
        try:
            parse_proposal_text("Reply: " + json.dumps(data), scenario)
            raise AssertionError(f"{data} accepted")
        except expected as e:
            assert e.fragment
    print("     ✓ Unknown kinds, self pairs and dangling references rejected")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "proposal.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_heuristic("merge")[2].to_dict(), f)
        loaded = load_proposal(path, scenario)
        assert loaded.intent_i.target_lane_id == "L0" and loaded.backend == "heuristic"
        try:
            load_proposal(os.path.join(tmp, "missing.json"), scenario)
            raise AssertionError("missing proposal file accepted")
        except InputError:
            pass
    print("     ✓ Proposal files reload through the same validation")


def test_render_parse_round_trip():
    print("Testing proposal text round trip...")
    for name in fixture_names():
        scenario, _, heuristic = _heuristic(name)
        candidates = [heuristic] + [propose_random(scenario, seed) for seed in range(5)]
        for proposal in candidates:
            parsed = parse_proposal_text(render_proposal(proposal), scenario)
            assert parsed == proposal, (name, proposal)
    print("     ✓ Rendered proposals parse back equal for every fixture")


def test_service_backend():
    print("Testing chat-service backend...")
    scenario = build_fixture("merge")

    print("  1. Canned reply...")
    with StubChatServer(["The left vehicle is closing on the right one.", VALID_REPLY]) as stub:
        config = ProposerConfig(gateway=GatewayConfig(base_url=stub.base_url, max_retries=0))
        _, proposal = propose(scenario, ProposerBackend.SERVICE, config,
                              _quiet_gateway(stub.base_url))
        assert len(stub.requests) == 2
        stage_two = stub.requests[1].body["messages"][-1]["content"]
        assert "The left vehicle is closing" in stage_two
    assert proposal == parse_proposal_text(VALID_REPLY, scenario)
    print("     ✓ Proposal equals the canned content")

    print("  2. Single stage...")
    with StubChatServer([VALID_REPLY]) as stub:
        config = ProposerConfig(single_stage=True)
        _, proposal = propose(scenario, ProposerBackend.SERVICE, config, _quiet_gateway(stub.base_url))
        assert len(stub.requests) == 1
    assert proposal.backend == "service"
    print("     ✓ One request skips the description stage")

    print("  3. Garbage replies...")
    with StubChatServer(["scene", "garbage", "still garbage", "{}"]) as stub:
        _, proposal = propose(scenario, ProposerBackend.SERVICE, ProposerConfig(retries=2),
                              _quiet_gateway(stub.base_url))
        assert len(stub.requests) == 4
        feedback = stub.requests[2].body["messages"][-1]["content"]
        assert "could not be used" in feedback
    assert proposal.backend == "heuristic-fallback"
    assert proposal.intent_i.kind == IntentKind.LANE_CHANGE_RIGHT
    print("     ✓ Falls back to the heuristic proposer")

    print("  4. Unreachable service...")
    with StubChatServer(default=ScriptedReply(status=503)) as stub:
        _, proposal = propose(scenario, ProposerBackend.SERVICE, ProposerConfig(),
                              _quiet_gateway(stub.base_url, max_retries=1))
    assert proposal.backend == "heuristic-fallback"
    try:
        propose(scenario, ProposerBackend.SERVICE, ProposerConfig())
        raise AssertionError("service backend without gateway accepted")
    except InputError:
        pass
    print("     ✓ Gateway failures fall back as well")


def main():
    """Run all proposer tests"""
    print("=== Proposer Tests ===\n")

    tests = [
        ("Scene Description", test_scene_description),
        ("Pair Selection", test_pair_selection),
        ("Heuristic Rules", test_heuristic_rules),
        ("Random Backend", test_random_backend),
        ("JSON Extraction", test_json_extraction),
        ("Reply Parsing", test_reply_parsing),
        ("Round Trip", test_render_parse_round_trip),
        ("Service Backend", test_service_backend),
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
