import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import central_difference, rel_error

from fisnav.coldstart import trace_sequences
from fisnav.policy import (
    NavPolicy,
    ParamVector,
    ShapeMismatch,
    TracePolicy,
    action_distribution,
    kl_and_grad,
    load_params,
    log_prob_and_grad,
    mean_token_nll,
    mlp_layout,
    rollout_log_probs,
    sample_rollout,
    save_params,
    sequence_nll,
    sft_step,
)
from fisnav.vocab import VOCAB, tokenize

LAYOUT = mlp_layout(5, 4, 3)


def random_params(rng, layout=LAYOUT, scale=1.0):
    n = sum(int(np.prod(s)) for _, s in layout)
    return ParamVector(rng.normal(0, scale, n), layout)


def naive_forward(params, x):
    """Loop-based re-implementation of the two-layer softmax map."""
    b = params.blocks()
    W1, b1, W2, b2 = b["W1"], b["b1"], b["W2"], b["b2"]
    h = [math.tanh(sum(W1[i][k] * x[k] for k in range(len(x))) + b1[i]) for i in range(len(b1))]
    z = [sum(W2[o][i] * h[i] for i in range(len(h))) + b2[o] for o in range(len(b2))]
    e = [math.exp(v) for v in z]
    return [v / sum(e) for v in e]


def test_zero_params_are_uniform():
    p = action_distribution(ParamVector.zeros(NavPolicy().layout), np.ones(35))
    assert np.allclose(p, 0.25, atol=0)
    lp, _ = log_prob_and_grad(ParamVector.zeros(NavPolicy().layout), np.ones(35), 2)
    assert lp == pytest.approx(math.log(0.25), abs=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_forward_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    params = random_params(rng, scale=2.0)
    x = rng.normal(0, 3, 5)
    p = action_distribution(params, x)
    assert np.all(p > 0) and abs(p.sum() - 1.0) < 1e-12
    assert np.allclose(p, naive_forward(params, x), atol=1e-12)


def test_log_prob_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        params = random_params(rng)
        x = rng.normal(0, 1, 5)
        k = int(rng.integers(3))
        _, g = log_prob_and_grad(params, x, k)
        f = lambda th: log_prob_and_grad(params.with_data(th), x, k)[0]
        assert rel_error(g.data, central_difference(f, params.data, 1e-5)) < 1e-4


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(20):
        params, ref = random_params(rng), random_params(rng)
        X = rng.normal(0, 1, (4, 5))
        kl, g = kl_and_grad(params, ref, X)
        assert kl >= 0
        f = lambda th: kl_and_grad(params.with_data(th), ref, X)[0]
        assert rel_error(g, central_difference(f, params.data, 1e-5)) < 1e-4
    assert kl_and_grad(params, params, X)[0] == pytest.approx(0.0, abs=1e-15)


def test_saturated_hidden_units_have_no_gradient():
    layout = mlp_layout(2, 3, 2)
    W1 = np.full((3, 2), 100.0)
    flat = np.concatenate([W1.ravel(), np.zeros(3), np.ones(6) * 0.3, np.zeros(2)])
    p = ParamVector(flat, layout)
    _, g = log_prob_and_grad(p, np.array([1.0, 1.0]), 0)
    first_layer = g.block("W1")
    assert np.all(np.abs(first_layer) < 1e-6)


def test_shape_errors():
    params = NavPolicy().init(0)
    with pytest.raises(ShapeMismatch):
        action_distribution(params, np.ones(7))
    with pytest.raises(ShapeMismatch):
        log_prob_and_grad(params, np.ones(35), 4)
    with pytest.raises(ShapeMismatch):
        ParamVector(np.ones(3), LAYOUT)
    with pytest.raises(ValueError):
        ParamVector(np.full(sum(int(np.prod(s)) for _, s in LAYOUT), np.nan), LAYOUT)


def test_params_are_immutable():
    p = NavPolicy().init(0)
    with pytest.raises(ValueError):
        p.data[0] = 1.0


def test_checkpoint_round_trip(tmp_path):
    p = NavPolicy().init(3, scale2=0.1)
    save_params(p, tmp_path / "a.params", {"note": "x"})
    q, meta = load_params(tmp_path / "a.params")
    assert q == p and meta == {"note": "x"}
    raw = (tmp_path / "a.params").read_bytes()
    n = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8:8 + n])
    assert header["count"] == len(p) and len(raw) == 8 + n + 8 * len(p)
    assert np.array_equal(np.frombuffer(raw[8 + n:], "<f8"), p.data)
    (tmp_path / "b.params").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_params(tmp_path / "b.params")


@given(st.integers(0, 1000))
def test_navigation_rollouts_are_seeded_and_bounded(seed):
    from fisnav.bundle import bundled_scenes, bundled_suite

    ep = bundled_suite("nav4")[1]
    scene = bundled_scenes()[ep.scene_id]
    params = NavPolicy().init(seed % 7, scale2=1.0)
    a = sample_rollout(params, ep, "navigation", seed, 20, scene=scene)
    b = sample_rollout(params, ep, "navigation", seed, 20, scene=scene)
    assert a.same_as(b)
    assert len(a.choices) <= 20 and len(a.trajectory) == len(a.choices) + 1
    assert np.allclose(rollout_log_probs(params, a), a.log_probs, atol=1e-12, rtol=0)
    assert all(t.startswith("<think>") for t in a.traces)


@given(st.integers(0, 1000))
def test_trace_rollouts_terminate(seed):
    pol = TracePolicy()
    params = pol.init(seed % 5, scale2=2.0)
    r = sample_rollout(params, None, "trace", seed, trace_policy=pol)
    assert len(r.choices) <= pol.max_len - 1
    assert np.allclose(rollout_log_probs(params, r), r.log_probs, atol=1e-12, rtol=0)
    assert r.same_as(sample_rollout(params, None, "trace", seed, trace_policy=pol))


def test_uniform_nll_is_length_times_log_vocab():
    pol = TracePolicy()
    zero = ParamVector.zeros(pol.layout)
    seq = tokenize("<think>goal ahead</think><action>FORWARD</action>")
    assert len(VOCAB) == 24
    assert sequence_nll(zero, pol, seq) == pytest.approx(len(seq) * math.log(24), abs=1e-9)


def test_sft_step_descends_on_a_fixed_sequence():
    pol = TracePolicy()
    params = pol.init(0)
    seq = tokenize("<think>goal left far clear ahead turn left</think><action>TURN_LEFT</action>")
    losses = []
    for _ in range(51):
        params, loss = sft_step(params, [seq], 0.05, pol)
        losses.append(loss)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    same, loss = sft_step(params, [seq], 0.0, pol)
    assert same is params and loss == pytest.approx(losses[-1], rel=0.1)
    with pytest.raises(ValueError):
        sft_step(params, [], 0.1, pol)


def test_sft_halves_nll_on_corpus(corpus):
    pol = TracePolicy()
    seqs = trace_sequences(corpus, pol)
    assert len(seqs) == 200
    params = pol.init(0)
    before = mean_token_nll(ParamVector.zeros(pol.layout), seqs, pol)
    assert before == pytest.approx(math.log(24))
    for _ in range(2):
        for i in range(0, len(seqs), 8):
            params, _ = sft_step(params, seqs[i:i + 8], 0.5, pol)
    assert mean_token_nll(params, seqs, pol) <= 0.5 * before
