import json
import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fisnav.cot_engine import (
    ILLEGAL_ACTION,
    MUTATIONS,
    FilterOutcome,
    GeneratorEndpoint,
    GeneratorUnavailable,
    PromptBundle,
    RawRecord,
    StubGeneratorServer,
    build_prompt,
    distance_to_polyline,
    episode_prompts,
    feasibility_filter,
    generate,
    load_dataset,
    mock_generate,
    mutate,
    oracle_action,
    parse_observation,
    record_key,
    reference_poses,
    render_observation,
    rule_filter,
    synthesize_dataset,
)
from fisnav.geometry import ACTION_NAMES, ObservationVector, reference_actions
from fisnav.trace_format import format_reward, render_trace


def ob(bearing_deg=0.0, dist=3.0, ahead=5.0):
    rays = [5.0] * 16
    rays[8] = ahead
    return ObservationVector(tuple(rays), math.radians(bearing_deg), dist, 0.25)


def record(response, step=0, episode=None, feasible=ACTION_NAMES):
    ep_id = episode.id if episode else "e"
    scene_id = episode.scene_id if episode else "s"
    prompt = PromptBundle("go", render_observation(ob()), tuple(feasible))
    return RawRecord(scene_id, ep_id, step, prompt, response)


@given(st.lists(st.floats(0, 20), min_size=2, max_size=16), st.floats(-179, 179), st.floats(0, 20), st.floats(0, 1))
def test_observation_rendering_round_trips(rays, bearing, dist, frac):
    o = ObservationVector(tuple(rays), math.radians(bearing), dist, frac)
    back = parse_observation(render_observation(o))
    assert np.allclose(back.as_array(), o.as_array(), atol=1e-3)
    assert render_observation(back) == render_observation(o)


def test_parse_observation_rejects_other_text():
    with pytest.raises(ValueError):
        parse_observation("a kitchen")


def test_oracle_choices():
    assert oracle_action(ob(0.0), ACTION_NAMES) == "FORWARD"
    assert oracle_action(ob(90.0), ACTION_NAMES) == "TURN_LEFT"
    assert oracle_action(ob(-90.0), ACTION_NAMES) == "TURN_RIGHT"
    assert oracle_action(ob(0.0, dist=0.4), ACTION_NAMES) == "STOP"
    assert oracle_action(ob(0.0, dist=0.4), ("FORWARD", "TURN_LEFT")) == "FORWARD"
    assert oracle_action(ob(0.0, ahead=0.2), ACTION_NAMES) in ("TURN_LEFT", "TURN_RIGHT")
    assert oracle_action(ob(0.0), ("TURN_RIGHT",)) == "TURN_RIGHT"


def test_every_mutation_is_rejected_by_the_rule_stage():
    think, action = "goal ahead far clear ahead move ahead", "FORWARD"
    clean = render_trace(think, "action", action)
    assert rule_filter(record(clean)).kept
    for m in MUTATIONS:
        for seed in range(5):
            bad = mutate(clean, think, action, m, np.random.default_rng(seed))
            out = rule_filter(record(bad))
            assert not out.kept and out.stage == "rule", (m, bad)
    with pytest.raises(ValueError):
        mutate(clean, think, action, "shuffle", np.random.default_rng(0))


def test_rule_filter_reasons():
    assert rule_filter(record("nothing")).reason.startswith("parse:")
    assert rule_filter(record(render_trace("x", "action", ILLEGAL_ACTION))).reason.startswith("feasible_action:")
    assert rule_filter(record(render_trace("x", "action", "STOP"), feasible=("FORWARD",))).reason.startswith(
        "feasible_action:")
    assert rule_filter(record(render_trace("x", "answer", "sofa"))).reason.startswith("feasible_action:")
    # tag-free prose around the blocks is forgiven, then re-checked strictly
    assert rule_filter(record("Sure: " + render_trace("x", "action", "STOP") + " done")).kept


def test_filter_outcome_invariants():
    with pytest.raises(ValueError):
        FilterOutcome(True, "rule")
    with pytest.raises(ValueError):
        FilterOutcome(False)
    with pytest.raises(ValueError):
        FilterOutcome(False, "vibes", "x")


def test_prompt_validation(nav4):
    with pytest.raises(ValueError):
        PromptBundle("go", "obs", ())
    with pytest.raises(ValueError):
        PromptBundle("go", "obs", ("FLY",))
    with pytest.raises(ValueError):
        PromptBundle(" ", "obs", ("STOP",))
    p = build_prompt(nav4[0], ob(), ["FORWARD", "STOP"])
    assert PromptBundle.from_dict(p.to_dict()) == p
    r = record("x")
    assert RawRecord.from_dict(r.to_dict()) == r


def test_endpoint_validation():
    for bad in ({"corruption_rate": 1.5}, {"kind": "grpc"}, {"kind": "http"}, {"base_url": "http://x"},
                {"kind": "http", "base_url": "http://x", "timeout": 0}):
        with pytest.raises(ValueError):
            GeneratorEndpoint(**bad)


def test_feasibility_filter(scenes, nav4):
    ep = nav4[2]  # lounge: has obstacles
    scene = scenes[ep.scene_id]
    acts = reference_actions(ep, scene)
    poses = reference_poses(ep, scene)
    assert len(poses) == len(acts) and poses[0] == ep.start
    for i, a in enumerate(acts):
        rec = record(render_trace("x", "action", a.value), i, ep)
        assert feasibility_filter(rec, ep, scene).kept
    # stepping the wrong way from the start drifts off the path under a tight tolerance
    turn = next(i for i, a in enumerate(acts) if a.value != "FORWARD")
    rec = record(render_trace("x", "action", "FORWARD"), turn, ep)
    assert feasibility_filter(rec, ep, scene, tolerance=0.01).stage == "feasibility"
    assert feasibility_filter(record("<think>x</think><action>STOP</action>", 999, ep), ep, scene).reason == \
        "step outside the reference trajectory"


def test_feasibility_flags_collisions(box_scene):
    from fisnav.geometry import Episode, Pose, Trajectory

    # a one-step episode ending at a wall; FORWARD from its last pose leaves the room
    pts = ((9.6, 5.0), (9.85, 5.0))
    ep = Episode("wall", "box", Pose(pts[0], 0.0), "go", pts[-1], Trajectory(pts))
    rec = record(render_trace("x", "action", "FORWARD"), 1, ep)
    assert feasibility_filter(rec, ep, box_scene).reason == "collision"


def test_distance_to_polyline():
    pts = [(0, 0), (2, 0), (2, 2)]
    assert distance_to_polyline((1, 1), pts) == pytest.approx(1.0)
    assert distance_to_polyline((3, 3), pts) == pytest.approx(math.sqrt(2))
    assert distance_to_polyline((5, 0), [(0, 0)]) == 5.0


def test_mock_depends_on_key_not_call_order(scenes, nav4):
    ep = nav4[0]
    prompts = episode_prompts(ep, scenes[ep.scene_id])
    end = GeneratorEndpoint(corruption_rate=0.5, seed=3)
    fwd = [generate(p, end, record_key(ep.id, i)) for i, p in prompts]
    rev = [generate(p, end, record_key(ep.id, i)) for i, p in reversed(prompts)][::-1]
    assert fwd == rev
    assert mock_generate(prompts[0][1], end) == mock_generate(prompts[0][1], end)


def test_clean_mock_follows_the_reference(scenes, suite_all):
    end = GeneratorEndpoint()
    for ep in suite_all:
        scene = scenes[ep.scene_id]
        for i, p in episode_prompts(ep, scene):
            raw = generate(p, end, record_key(ep.id, i))
            assert format_reward(raw) == 1.0
            assert feasibility_filter(RawRecord(ep.scene_id, ep.id, i, p, raw), ep, scene).kept


def test_synthesis_extremes(tmp_path, scenes, suite_all):
    s0 = synthesize_dataset(suite_all, GeneratorEndpoint(corruption_rate=0.0), tmp_path / "a.jsonl", scenes)
    s1 = synthesize_dataset(suite_all, GeneratorEndpoint(corruption_rate=1.0), tmp_path / "b.jsonl", scenes)
    total = sum(len(reference_actions(e, scenes[e.scene_id])) for e in suite_all)
    assert s0.to_dict() == {"raw": total, "rule_rejected": 0, "feasibility_rejected": 0, "kept": total}
    assert s1.to_dict() == {"raw": total, "rule_rejected": total, "feasibility_rejected": 0, "kept": 0}
    rows = load_dataset(tmp_path / "a.jsonl")
    assert [(r["episode_id"], r["step_index"]) for r in rows] == sorted((r["episode_id"], r["step_index"]) for r in rows)
    assert (tmp_path / "b.jsonl").read_text() == ""


def test_synthesis_rejects_non_navigation_suites(scenes):
    from fisnav.bundle import bundled_suite

    with pytest.raises(ValueError):
        synthesize_dataset(bundled_suite("qa"), GeneratorEndpoint(), None, scenes)


def test_http_path_matches_mock(tmp_path, scenes, nav4):
    mock = GeneratorEndpoint(corruption_rate=0.3, seed=2)
    local = synthesize_dataset(nav4, mock, tmp_path / "local.jsonl", scenes)
    with StubGeneratorServer(mock, fail_first=1) as stub:
        http = GeneratorEndpoint(kind="http", base_url=stub.url, retries=2, timeout=5.0)
        remote = synthesize_dataset(nav4, http, tmp_path / "remote.jsonl", scenes, workers=4)
        assert stub.requests == local.raw + 1
    assert local == remote
    assert (tmp_path / "local.jsonl").read_bytes() == (tmp_path / "remote.jsonl").read_bytes()


def test_http_custom_field_names(scenes, nav4):
    ep = nav4[0]
    _, prompt = episode_prompts(ep, scenes[ep.scene_id])[0]
    with StubGeneratorServer(response_field="completion") as stub:
        end = GeneratorEndpoint(kind="http", base_url=stub.url, response_field="completion")
        assert generate(prompt, end, "k") == mock_generate(prompt, GeneratorEndpoint(), "k")
        wrong = GeneratorEndpoint(kind="http", base_url=stub.url, retries=0)
        with pytest.raises(GeneratorUnavailable):
            generate(prompt, wrong, "k")


def test_unreachable_generator_raises(scenes, nav4):
    ep = nav4[0]
    _, prompt = episode_prompts(ep, scenes[ep.scene_id])[0]
    end = GeneratorEndpoint(kind="http", base_url="http://127.0.0.1:9/generate", retries=1, timeout=0.5)
    with pytest.raises(GeneratorUnavailable):
        generate(prompt, end, "k")


def test_bundled_corpus(corpus, scenes):
    from fisnav.bundle import bundled_suite

    eps = {e.id: e for e in bundled_suite("all")}
    assert len(corpus) == 200
    for row in corpus:
        rec = RawRecord.from_dict(row)
        assert format_reward(row["trace"]) == 1.0
        assert rule_filter(rec).kept
        assert feasibility_filter(rec, eps[rec.episode_id], scenes[rec.scene_id]).kept
