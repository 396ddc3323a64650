"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (also repeated in
the terminal summary) and then asserts, so a failure is visible both ways.
"""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, random_trajectory
from factories import random_group, random_params
from oracles import brute_ndtw, central_difference, naive_frechet, population_std, rel_error

from fisnav.coldstart import coldstart_nav, coldstart_trace, nav_examples, trace_sequences
from fisnav.cot_engine import (
    GeneratorEndpoint,
    RawRecord,
    feasibility_filter,
    load_dataset,
    mock_generate,
    mutation_for,
    reference_poses,
    record_key,
    episode_prompts,
    synthesize_dataset,
)
from fisnav.fis import FisConfig, SlowSchedule, init_slow, run_episode
from fisnav.geometry import ACTION_NAMES, EpisodeSim, ObservationVector, reference_actions, step
from fisnav.grpo import GrpoConfig, NavTask, TraceTask, compute_advantages, evaluate_success, grpo_objective_and_grad, train
from fisnav.metrics import discrete_frechet, evaluate_trajectory, ndtw
from fisnav.policy import NavPolicy, TracePolicy, log_prob_and_grad, sample_nav_rollout
from fisnav.rewards import RewardConfig
from fisnav.serve import (
    HEADER,
    MAX_FRAME,
    ActionFrame,
    Controller,
    FisClient,
    ObservationFrame,
    ServerThread,
    decode_frame,
    encode_frame,
    run_remote_episode,
)
from fisnav.trace_format import format_reward, parse_trace
from fisnav.vocab import VOCAB

def verdict(n: int, ok: bool, elapsed: float, limit: float, detail: str) -> None:
    ok = ok and elapsed < limit
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail}; {elapsed:.1f}s of {limit:.0f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------------

def test_criterion_1_metric_oracles():
    t = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_ndtw = worst_frechet = 0.0
    for _ in range(500):
        a, b = random_trajectory(rng, 5), random_trajectory(rng, 5)
        d_th = float(rng.uniform(0.5, 3.0))
        worst_ndtw = max(worst_ndtw, abs(ndtw(a, b, d_th) - brute_ndtw(a.points, b.points, d_th)))
    for _ in range(500):
        a, b = random_trajectory(rng, 7), random_trajectory(rng, 7)
        worst_frechet = max(worst_frechet, abs(discrete_frechet(a, b) - naive_frechet(a.points, b.points)))
    elapsed = time.perf_counter() - t
    verdict(1, worst_ndtw < 1e-9 and worst_frechet < 1e-9, elapsed, 30,
            f"max |dnDTW| {worst_ndtw:.1e}, max |dFrechet| {worst_frechet:.1e}")


# 2 -------------------------------------------------------------------------------

def test_criterion_2_advantages():
    t = time.perf_counter()
    rng = np.random.default_rng(102)
    worst_mean = worst_std = 0.0
    for _ in range(1000):
        G = int(rng.integers(2, 17))
        rewards = rng.normal(rng.uniform(-5, 5), rng.uniform(0.01, 5), G)
        adv = compute_advantages(rewards)
        worst_mean = max(worst_mean, abs(sum(adv) / G))
        worst_std = max(worst_std, abs(population_std(adv) - 1.0))
    flat_ok = all(compute_advantages([c] * G) == [0.0] * G for c in (-2.5, 0.0, 1.0, 7.25) for G in (2, 5, 16))
    elapsed = time.perf_counter() - t
    verdict(2, worst_mean < 1e-9 and worst_std < 1e-9 and flat_ok, elapsed, 5,
            f"max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}, all-equal groups zero: {flat_ok}")


# 3 -------------------------------------------------------------------------------

def test_criterion_3_gradients():
    t = time.perf_counter()
    rng = np.random.default_rng(103)
    errors, clipped, with_kl = [], 0, 0
    for _ in range(100):
        params = random_params(rng)
        x, k = rng.normal(0, 1, 4), int(rng.integers(3))
        _, g = log_prob_and_grad(params, x, k)
        f = lambda th: log_prob_and_grad(params.with_data(th), x, k)[0]
        errors.append(rel_error(g.data, central_difference(f, params.data, 1e-5)))
    for i in range(60):
        theta, old, ref = random_params(rng), random_params(rng), random_params(rng)
        group = random_group(rng, theta, old)
        cfg = GrpoConfig(kl_beta=float(rng.uniform(0.01, 0.5)), clip_eps=0.2,
                         kl_reduction=("sequence", "context")[i % 2])
        _, grad = grpo_objective_and_grad(theta, old, ref, group, cfg)
        f = lambda th: grpo_objective_and_grad(theta.with_data(th), old, ref, group, cfg)[0]
        errors.append(rel_error(grad.data, central_difference(f, theta.data, 1e-6)))
        with_kl += cfg.kl_beta > 0
        ratios = [math.exp(sum(log_prob_and_grad(theta, x, c)[0] for x, c in zip(r.features, r.choices))
                           - sum(r.log_probs)) for r in group.rollouts]
        clipped += any(abs(q - 1.0) > cfg.clip_eps for q in ratios)
    elapsed = time.perf_counter() - t
    ok = len(errors) >= 150 and max(errors) < 1e-4 and clipped >= 10
    verdict(3, ok, elapsed, 60, f"{len(errors)} instances ({with_kl} with KL, {clipped} with an active clip), "
                                f"max rel error {max(errors):.1e}")


# 4 -------------------------------------------------------------------------------

def test_criterion_4_format_learning(scenes, nav4, corpus):
    t = time.perf_counter()
    policy = TracePolicy()
    task = TraceTask(scenes, policy)
    seqs = trace_sequences(corpus, policy)
    init, _ = coldstart_trace(policy.init(0), seqs[:16], 60, 0.5, policy)
    cold = evaluate_success(task, init, nav4, 50, 0)
    cfg = GrpoConfig(iterations=300, learning_rate=0.05, eval_every=10, eval_samples=50, seed=0)
    report = train(cfg, RewardConfig(enabled={"format"}), nav4, init, task)
    rates = [(r["iteration"] + 1, r["heldout_success"]) for r in report.rows[cfg.eval_every - 1::cfg.eval_every]]
    first = next((it for it, rate in rates if rate >= 0.95), None)
    elapsed = time.perf_counter() - t
    verdict(4, len(VOCAB) <= 24 and first is not None, elapsed, 120,
            f"vocab {len(VOCAB)}, well-formed rate {cold:.3f} after cold start, {rates[-1][1]:.3f} after 300 "
            f"iterations, first >= 0.95 at iteration {first}")


# 5 and 6 share the navigation cold start ----------------------------------------------

NAV_ITERATIONS = 60
NAV_LR = 0.005
EVAL_SAMPLES = 8


@pytest.fixture(scope="module")
def nav_setup(tmp_path_factory, scenes, suite_all, nav4):
    path = tmp_path_factory.mktemp("nav") / "dataset.jsonl"
    synthesize_dataset(suite_all, GeneratorEndpoint(corruption_rate=0.3, seed=0), path, scenes)
    fis, policy, slow = FisConfig(), NavPolicy(), init_slow(0)
    X, y = nav_examples(load_dataset(path), nav4, scenes, slow, fis, policy)
    init, _ = coldstart_nav(policy.init(0), X, y, 200, 0.5)
    return NavTask(scenes, slow, fis, policy), init


def test_criterion_5_navigation_improvement(nav_setup, nav4):
    t = time.perf_counter()
    task, init = nav_setup
    arms = {"full": {"format", "understanding", "navigation"}, "format": {"format"},
            "understanding": {"understanding"}, "navigation": {"navigation"}}
    seeds = range(5)
    cold = np.mean([evaluate_success(task, init, nav4, EVAL_SAMPLES, s) for s in seeds])
    sr = {}
    for name, enabled in arms.items():
        runs = []
        for s in seeds:
            cfg = GrpoConfig(iterations=NAV_ITERATIONS, learning_rate=NAV_LR, eval_every=0, seed=s)
            params = train(cfg, RewardConfig(enabled=enabled), nav4, init, task).final_params
            runs.append(evaluate_success(task, params, nav4, EVAL_SAMPLES, s))
        sr[name] = float(np.mean(runs))
    elapsed = time.perf_counter() - t
    gain = sr["full"] - cold
    ok = gain >= 0.30 and all(sr["full"] >= sr[k] for k in ("format", "understanding", "navigation"))
    verdict(5, ok, elapsed, 900, f"cold SR {cold:.3f}, " + ", ".join(f"{k} {v:.3f}" for k, v in sr.items())
            + f", gain {gain:+.3f}")


BETAS = (0.005, 0.01, 0.02, 0.03, 0.05)
BETA_ITERATIONS = NAV_ITERATIONS


def test_criterion_6_beta_sweep(nav_setup, nav4):
    t = time.perf_counter()
    task, init = nav_setup
    assert GrpoConfig().kl_beta == 0.02
    kls = []
    for beta in BETAS:
        cfg = GrpoConfig(iterations=BETA_ITERATIONS, learning_rate=NAV_LR, eval_every=0, seed=0, kl_beta=beta)
        kls.append(train(cfg, RewardConfig(), nav4, init, task).final_kl)
    elapsed = time.perf_counter() - t
    ok = all(b <= a for a, b in zip(kls, kls[1:]))
    verdict(6, ok, elapsed, 600, "final KL " + ", ".join(f"{b:g}: {k:.4f}" for b, k in zip(BETAS, kls)))


# 7 -------------------------------------------------------------------------------

def test_criterion_7_dual_rate_schedule(scenes, nav4):
    t = time.perf_counter()
    rng = np.random.default_rng(107)
    slow, fast = init_slow(0), NavPolicy().init(1, scale2=1.0)
    bad = 0
    for _ in range(200):
        budget, n, H = int(rng.integers(1, 49)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        ep = nav4[int(rng.integers(len(nav4)))]
        log = run_episode(ep, FisConfig(n=n, H=H), slow, fast, budget, int(rng.integers(2**31)),
                          scene=scenes[ep.scene_id])
        T = len(log.steps)
        stale = any(not 0 <= s["step"] - s["latent_step"] <= n - 1 for s in log.steps)
        bad += len(log.slow_steps) != math.ceil(T / n) or stale
    same = True
    for seed, ep in enumerate(nav4):
        scene, cfg = scenes[ep.scene_id], FisConfig(n=1, H=1)
        log = run_episode(ep, cfg, slow, fast, 48, seed, scene=scene)
        ro = sample_nav_rollout(fast, NavPolicy(), ep, scene, seed, 48, SlowSchedule(slow, cfg, ep.instruction))
        same &= log.actions == [a.value for a in ro.actions] and log.trajectory == ro.trajectory
    elapsed = time.perf_counter() - t
    verdict(7, bad == 0 and same, elapsed, 30, f"{bad}/200 schedule violations, n=1/H=1 identical: {same}")


# 8 -------------------------------------------------------------------------------

def _recount(suite, scenes, endpoint):
    """Stats recomputed from the corruption schedule and first principles."""
    counts = {"raw": 0, "rule_rejected": 0, "feasibility_rejected": 0, "kept": 0}
    for ep in suite:
        if ep.task_kind != "navigation":
            continue
        scene = scenes[ep.scene_id]
        ref = np.asarray(ep.reference_trajectory.points)
        for (i, prompt), pose in zip(episode_prompts(ep, scene), reference_poses(ep, scene)):
            key = record_key(ep.id, i)
            text = mock_generate(prompt, endpoint, key)
            counts["raw"] += 1
            corrupted = mutation_for(endpoint.seed, key, endpoint.corruption_rate) is not None
            if corrupted or format_reward(text) != 1.0:
                counts["rule_rejected"] += 1
                continue
            res = step(pose, parse_trace(text).decision, scene)
            p = np.asarray(res.new_pose.position)
            off = min(np.linalg.norm(p - (a + np.clip(np.dot(p - a, b - a) / max(np.dot(b - a, b - a), 1e-300), 0, 1)
                                          * (b - a))) for a, b in zip(ref, ref[1:])) if len(ref) > 1 else \
                np.linalg.norm(p - ref[0])
            if res.collided or off > 2 * scene.step_size:
                counts["feasibility_rejected"] += 1
            else:
                counts["kept"] += 1
    return counts


def test_criterion_8_synthesis_soundness(tmp_path, scenes, suite_all):
    t = time.perf_counter()
    details, ok = [], True
    by_id = {ep.id: ep for ep in suite_all}
    for rate in (0.0, 0.3, 1.0):
        endpoint = GeneratorEndpoint(corruption_rate=rate, seed=7)
        path = tmp_path / f"r{rate}.jsonl"
        stats = synthesize_dataset(suite_all, endpoint, path, scenes).to_dict()
        recount = _recount(suite_all, scenes, endpoint)
        rows = load_dataset(path)
        resound = all(format_reward(r["trace"]) == 1.0 and format_reward(r["raw_response"]) == 1.0
                      and feasibility_filter(RawRecord.from_dict(r), by_id[r["episode_id"]],
                                             scenes[r["scene_id"]]).kept for r in rows)
        ok &= stats == recount and resound and len(rows) == stats["kept"]
        details.append(f"rate {rate:g}: {stats['kept']}/{stats['raw']} kept, recount "
                       f"{'matches' if stats == recount else 'differs'}")
    elapsed = time.perf_counter() - t
    verdict(8, ok, elapsed, 60, "; ".join(details))


# 9 -------------------------------------------------------------------------------

def _random_frame(rng):
    sid = "".join(rng.choice(list("abcdefxyz0123-_é"), int(rng.integers(1, 12))))
    step_ = int(rng.integers(0, 2**62))
    if rng.random() < 0.5:
        rays = tuple(float(v) for v in rng.uniform(0, 20, int(rng.integers(1, 20))))
        obs = ObservationVector(rays, *map(float, rng.normal(0, 3, 3)))
        instr = "go to the sofa" if rng.random() < 0.3 else None
        return ObservationFrame(sid, step_, obs, int(rng.integers(0, 2**62)), instr)
    actions = tuple(rng.choice(ACTION_NAMES, int(rng.integers(1, 6))))
    return ActionFrame(sid, step_, actions, int(rng.integers(0, 2**62)), int(rng.integers(0, 2**62)),
                       int(rng.integers(0, 2**62)))


def test_criterion_9_protocol(scenes, nav4):
    t = time.perf_counter()
    rng = np.random.default_rng(109)
    exact = 0
    for _ in range(10_000):
        f = _random_frame(rng)
        data = encode_frame(f.to_dict())
        d, rest = decode_frame(data)
        back = type(f).from_dict(d)
        exact += back == f and encode_frame(back.to_dict()) == data and rest == b""

    make = lambda: Controller(init_slow(0), NavPolicy().init(1, scale2=1.0), FisConfig(), 4)
    obs = ObservationVector(tuple([1.0] * 16), 0.0, 1.0, 0.0)
    good = lambda step_: ObservationFrame("e", step_, obs, time.monotonic_ns())
    bad_frames = {
        "malformed": HEADER.pack(3) + b"{x}",
        "invalid-frame": encode_frame({"session_id": "e"}),
        "shape": encode_frame({"session_id": "e", "step": 1, "observation": [0, 0], "client_send_time": 0}),
        "out-of-order": encode_frame(good(0).to_dict()),
        "truncated": HEADER.pack(50) + b'{"session',
        "too-large": HEADER.pack(MAX_FRAME + 5) + b"x" * 10,
    }
    typed = []
    with ServerThread(make(), frame_timeout=0.2) as srv, FisClient(srv.address) as cl:
        cl.request_actions(good(0))
        for code, raw in bad_frames.items():
            cl.send_raw(raw)
            typed.append(cl.recv_frame().get("error", {}).get("code") == code)
        survived = cl.request_actions(good(1)).step == 1 and srv.server.stats.connections == 1

    import threading

    jobs = [(f"s{i}", ep, scenes[ep.scene_id]) for i, ep in enumerate(nav4[:2])]
    sequential, concurrent = {}, {}
    for sid, ep, scene in jobs:
        with ServerThread(make()) as srv, FisClient(srv.address) as cl:
            sequential[sid] = run_remote_episode(cl, sid, ep, scene, 30).log
    with ServerThread(make()) as srv:
        def go(sid, ep, scene):
            with FisClient(srv.address) as cl:
                concurrent[sid] = run_remote_episode(cl, sid, ep, scene, 30).log
        threads = [threading.Thread(target=go, args=j) for j in jobs]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    elapsed = time.perf_counter() - t
    ok = exact == 10_000 and all(typed) and survived and concurrent == sequential
    verdict(9, ok, elapsed, 60, f"{exact}/10000 frames bit-exact, {sum(typed)}/{len(typed)} typed errors, "
                                f"connection kept: {survived}, concurrent == sequential: {concurrent == sequential}")


# 10 ------------------------------------------------------------------------------

def test_criterion_10_perfect_replay(scenes, suite_all):
    t = time.perf_counter()
    failures, count = [], 0
    for ep in suite_all:
        if ep.task_kind != "navigation":
            continue
        count += 1
        scene = scenes[ep.scene_id]
        actions = reference_actions(ep, scene)
        sim = EpisodeSim(ep, scene, len(actions), stop_on_arrival=False)
        for a in actions:
            sim.apply(a)
        r = evaluate_trajectory(sim.trajectory, ep, scene)
        if not (r.sr == 1 and abs(r.spl - 1) < 1e-9 and abs(r.ndtw - 1) < 1e-9 and r.ne < ep.success_radius):
            failures.append(ep.id)
    elapsed = time.perf_counter() - t
    verdict(10, not failures and count > 0, elapsed, 10, f"{count - len(failures)}/{count} episodes replay perfectly")
