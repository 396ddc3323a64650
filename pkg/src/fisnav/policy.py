"""Two-layer tanh/softmax policies with hand-derived gradients.

All parameters live in a flat :class:`ParamVector`; the network is
``p = softmax(W2 tanh(W1 x + b1) + b2)``.  Batched helpers take a feature
matrix ``X`` of shape (T, in) and per-row choices.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import ACTION_NAMES, ACTIONS, Action, Episode, EpisodeSim, ObservationVector, Scene, Trajectory
from .trace_format import render_trace
from .vocab import EOS_ID, VOCAB, detokenize, think_for

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ParamVector:
    data: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64).ravel()
        if data.size != sum(int(np.prod(s)) for _, s in self.layout):
            raise ShapeMismatch("data size does not match layout")
        if not np.all(np.isfinite(data)):
            raise ValueError("parameters must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "layout", tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout))

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(sum(int(np.prod(s)) for _, s in layout)), layout)

    def __len__(self) -> int:
        return self.data.size

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ParamVector) and self.layout == other.layout and np.array_equal(self.data, other.data)

    def blocks(self) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.data[i:i + n].reshape(shape)
            i += n
        return out

    def block(self, name: str) -> np.ndarray:
        return self.blocks()[name]

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(data, self.layout)

    def subset(self, prefix: str) -> "ParamVector":
        """Blocks whose names start with ``prefix + '.'``, prefix stripped."""
        b = self.blocks()
        names = [(n, s) for n, s in self.layout if n.startswith(prefix + ".")]
        if not names:
            raise KeyError(prefix)
        return ParamVector(np.concatenate([b[n].ravel() for n, _ in names]),
                           tuple((n[len(prefix) + 1:], s) for n, s in names))

    @staticmethod
    def merge(parts: dict[str, "ParamVector"]) -> "ParamVector":
        layout = tuple((f"{p}.{n}", s) for p, pv in parts.items() for n, s in pv.layout)
        return ParamVector(np.concatenate([pv.data for pv in parts.values()]), layout)


# --- checkpoints --------------------------------------------------------------
# [8-byte little-endian uint64: header length][UTF-8 JSON header][count x float64 LE]

CHECKPOINT_FORMAT = "fisnav-params"


def save_params(params: ParamVector, path: str | Path, meta: dict | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "layout": [{"name": n, "shape": list(s)} for n, s in params.layout],
        "count": len(params),
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(params.data.astype("<f8").tobytes())


def load_params(path: str | Path) -> tuple[ParamVector, dict]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", raw, 0)
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    data = np.frombuffer(raw, dtype="<f8", offset=8 + n)
    if data.size != header["count"]:
        raise ValueError(f"{path}: truncated checkpoint")
    layout = tuple((b["name"], tuple(b["shape"])) for b in header["layout"])
    return ParamVector(data.astype(np.float64), layout), header.get("meta", {})


# --- the network --------------------------------------------------------------

def mlp_layout(n_in: int, hidden: int, n_out: int) -> Layout:
    return (("W1", (hidden, n_in)), ("b1", (hidden,)), ("W2", (n_out, hidden)), ("b2", (n_out,)))


def init_mlp(layout: Layout, seed: int, scale1: float = 0.5, scale2: float = 0.0) -> ParamVector:
    """Gaussian first layer (std scale1/sqrt(n_in)), second layer std scale2."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in layout:
        if name == "W1":
            parts.append(rng.normal(0.0, scale1 / math.sqrt(shape[1]), shape).ravel())
        elif name == "W2" and scale2 > 0:
            parts.append(rng.normal(0.0, scale2 / math.sqrt(shape[1]), shape).ravel())
        else:
            parts.append(np.zeros(int(np.prod(shape))))
    return ParamVector(np.concatenate(parts), layout)


def _unpack(params: ParamVector, n_in: int):
    b = params.blocks()
    try:
        W1, b1, W2, b2 = b["W1"], b["b1"], b["W2"], b["b2"]
    except KeyError as exc:
        raise ShapeMismatch(f"parameter layout lacks {exc}") from None
    if W1.shape[1] != n_in:
        raise ShapeMismatch(f"features have width {n_in}, layout expects {W1.shape[1]}")
    return W1, b1, W2, b2


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(params: ParamVector, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hidden activations and log-probabilities for a batch of feature rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    W1, b1, W2, b2 = _unpack(params, X.shape[1])
    H = np.tanh(X @ W1.T + b1)
    return H, _log_softmax(H @ W2.T + b2)


def action_distribution(params: ParamVector, features) -> np.ndarray:
    return np.exp(forward(params, features)[1][0])


def _backward(params: ParamVector, X: np.ndarray, H: np.ndarray, dZ: np.ndarray) -> np.ndarray:
    """Gradient of sum(dZ * Z) w.r.t. all parameters, flattened in layout order."""
    W1, _, W2, _ = _unpack(params, X.shape[1])
    dW2 = dZ.T @ H
    db2 = dZ.sum(axis=0)
    dA = (dZ @ W2) * (1.0 - H * H)
    dW1 = dA.T @ X
    db1 = dA.sum(axis=0)
    grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}
    return np.concatenate([grads[name].ravel() for name, _ in params.layout])


def batch_log_probs(params: ParamVector, X: np.ndarray, choices) -> np.ndarray:
    _, logp = forward(params, X)
    return logp[np.arange(len(logp)), np.asarray(choices, dtype=int)]


def weighted_log_prob_grad(params: ParamVector, X: np.ndarray, choices, weights) -> tuple[np.ndarray, np.ndarray]:
    """Per-row log-probs and the gradient of sum_t weights[t] * log p(choice_t | x_t)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    choices = np.asarray(choices, dtype=int)
    H, logp = forward(params, X)
    P = np.exp(logp)
    dZ = -P
    dZ[np.arange(len(X)), choices] += 1.0
    dZ *= np.asarray(weights, dtype=float)[:, None]
    return logp[np.arange(len(X)), choices], _backward(params, X, H, dZ)


def log_prob_and_grad(params: ParamVector, features, choice: int) -> tuple[float, ParamVector]:
    X = np.atleast_2d(np.asarray(features, dtype=float))
    n_out = params.block("b2").shape[0]
    if not 0 <= int(choice) < n_out:
        raise ShapeMismatch(f"choice {choice} outside 0..{n_out - 1}")
    logp, g = weighted_log_prob_grad(params, X, [choice], [1.0])
    return float(logp[0]), params.with_data(g)


def kl_and_grad(params: ParamVector, ref_params: ParamVector, X: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of KL(pi_params || pi_ref) and its gradient w.r.t. params."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    H, logp = forward(params, X)
    _, logq = forward(ref_params, X)
    P = np.exp(logp)
    kl_rows = (P * (logp - logq)).sum(axis=1)
    dZ = P * (logp - logq - kl_rows[:, None]) / len(X)
    return float(kl_rows.mean()), _backward(params, X, H, dZ)


def kl_divergence(params: ParamVector, ref_params: ParamVector, contexts) -> float:
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    if contexts.shape[0] == 0:
        raise ValueError("need at least one context")
    return kl_and_grad(params, ref_params, contexts)[0]


def sample_index(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw; ``u`` uniform on [0, 1)."""
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(probs) - 1))


# --- navigation policy ----------------------------------------------------------

@dataclass(frozen=True)
class NavPolicy:
    obs_width: int = 19
    latent_width: int = 16
    hidden: int = 32

    @property
    def n_in(self) -> int:
        return self.obs_width + self.latent_width

    @property
    def layout(self) -> Layout:
        return mlp_layout(self.n_in, self.hidden, len(ACTIONS))

    def init(self, seed: int, scale1: float = 0.5, scale2: float = 0.0) -> ParamVector:
        return init_mlp(self.layout, seed, scale1, scale2)

    def features(self, obs: ObservationVector | np.ndarray, latent: np.ndarray | None) -> np.ndarray:
        o = obs.as_array() if isinstance(obs, ObservationVector) else np.asarray(obs, dtype=float)
        h = np.zeros(self.latent_width) if latent is None else np.asarray(latent, dtype=float)
        if o.size != self.obs_width or h.size != self.latent_width:
            raise ShapeMismatch(f"expected {self.obs_width}+{self.latent_width} features, got {o.size}+{h.size}")
        return np.concatenate([o, h])


# latent_source(history, step) -> (latent vector or None, produced_at_step)
LatentSource = Callable[[list, int], tuple]


@dataclass(frozen=True, eq=False)
class Rollout:
    kind: str  # "navigation" | "trace"
    choices: tuple[int, ...]
    features: np.ndarray  # (T, n_in) rows actually sampled
    log_probs: tuple[float, ...]
    traces: tuple[str, ...]
    trajectory: Trajectory | None = None
    latent_steps: tuple[int, ...] = ()
    collisions: int = 0

    @property
    def total_log_prob(self) -> float:
        return float(sum(self.log_probs))

    @property
    def actions(self) -> tuple[Action, ...]:
        return tuple(ACTIONS[c] for c in self.choices) if self.kind == "navigation" else ()

    def same_as(self, other: "Rollout") -> bool:
        return (self.kind == other.kind and self.choices == other.choices and self.log_probs == other.log_probs
                and self.traces == other.traces and self.trajectory == other.trajectory
                and np.array_equal(self.features, other.features) and self.latent_steps == other.latent_steps)


def nav_step_trace(obs: ObservationVector, action: Action) -> str:
    return render_trace(think_for(obs, action.value), "action", action.value)


def sample_nav_rollout(params: ParamVector, policy: NavPolicy, episode: Episode, scene: Scene,
                       rng: np.random.Generator | int, max_steps: int,
                       latent_source: LatentSource | None = None, stop_on_arrival: bool = True,
                       forced_actions: Sequence[Action] | None = None) -> Rollout:
    """Closed-loop rollout; one uniform draw per step.  With ``forced_actions``
    the draws are skipped and the given actions executed instead."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    sim = EpisodeSim(episode, scene, max_steps, stop_on_arrival=stop_on_arrival, n_rays=policy.obs_width - 3)
    history: list[ObservationVector] = []
    rows, choices, logps, traces, lsteps = [], [], [], [], []
    while not sim.done:
        obs = sim.observation()
        history.append(obs)
        latent, produced = latent_source(history, sim.step_index) if latent_source else (None, 0)
        x = policy.features(obs, latent)
        logp = forward(params, x)[1][0]
        if forced_actions is not None:
            if len(choices) >= len(forced_actions):
                break
            k = ACTIONS.index(Action(forced_actions[len(choices)]))
        else:
            k = sample_index(np.exp(logp), rng.random())
        rows.append(x)
        choices.append(k)
        logps.append(float(logp[k]))
        lsteps.append(produced)
        traces.append(nav_step_trace(obs, ACTIONS[k]))
        sim.apply(ACTIONS[k])
    return Rollout("navigation", tuple(choices), np.array(rows).reshape(len(rows), policy.n_in),
                   tuple(logps), tuple(traces), sim.trajectory, tuple(lsteps), sim.collisions)


# --- trace policy ---------------------------------------------------------------

@dataclass(frozen=True)
class TracePolicy:
    vocab: tuple[str, ...] = VOCAB
    max_len: int = 24
    hidden: int = 32

    @property
    def n_in(self) -> int:
        return len(self.vocab) + self.max_len

    @property
    def layout(self) -> Layout:
        return mlp_layout(self.n_in, self.hidden, len(self.vocab))

    def init(self, seed: int, scale1: float = 1.0, scale2: float = 0.0) -> ParamVector:
        return init_mlp(self.layout, seed, scale1, scale2)

    def context(self, prev: int | None, position: int) -> np.ndarray:
        x = np.zeros(self.n_in)
        if prev is not None:
            x[prev] = 1.0
        x[len(self.vocab) + position] = 1.0
        return x

    def contexts(self, tokens: Sequence[int]) -> np.ndarray:
        """Feature rows for every modelled position of ``tokens``; the final
        position's forced EOS is not modelled."""
        n = min(len(tokens), self.max_len - 1)
        X = np.zeros((n, self.n_in))
        for t in range(n):
            if t:
                X[t, tokens[t - 1]] = 1.0
            X[t, len(self.vocab) + t] = 1.0
        return X

    def modelled(self, tokens: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        if len(tokens) > self.max_len:
            raise ShapeMismatch(f"sequence longer than max_len={self.max_len}")
        X = self.contexts(tokens)
        return X, np.asarray(tokens[: len(X)], dtype=int)

    def render(self, tokens: Sequence[int]) -> str:
        return detokenize(tokens)


def sequence_nll(params: ParamVector, policy: TracePolicy, tokens: Sequence[int]) -> float:
    X, y = policy.modelled(tokens)
    if not len(X):
        return 0.0
    return float(-batch_log_probs(params, X, y).sum())


def sample_trace_rollout(params: ParamVector, policy: TracePolicy, rng: np.random.Generator | int) -> Rollout:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    tokens: list[int] = []
    rows, logps = [], []
    prev = None
    for pos in range(policy.max_len):
        if pos == policy.max_len - 1:
            tokens.append(EOS_ID)
            break
        x = policy.context(prev, pos)
        logp = forward(params, x)[1][0]
        k = sample_index(np.exp(logp), rng.random())
        rows.append(x)
        tokens.append(k)
        logps.append(float(logp[k]))
        prev = k
        if k == EOS_ID:
            break
    return Rollout("trace", tuple(tokens[: len(rows)]), np.array(rows), tuple(logps), (policy.render(tokens),))


def sample_rollout(params: ParamVector, episode: Episode | None, kind: str, rng_seed: int, max_steps: int = 48,
                   *, scene: Scene | None = None, nav_policy: NavPolicy | None = None,
                   trace_policy: TracePolicy | None = None, latent_source: LatentSource | None = None,
                   stop_on_arrival: bool = True) -> Rollout:
    if kind == "navigation":
        if episode is None or scene is None:
            raise ValueError("navigation rollouts need an episode and its scene")
        return sample_nav_rollout(params, nav_policy or NavPolicy(), episode, scene, rng_seed, max_steps,
                                  latent_source, stop_on_arrival)
    if kind == "trace":
        return sample_trace_rollout(params, trace_policy or TracePolicy(), rng_seed)
    raise ValueError(f"unknown rollout kind {kind!r}")


def rollout_log_probs(params: ParamVector, rollout: Rollout) -> np.ndarray:
    if not len(rollout.choices):
        return np.zeros(0)
    return batch_log_probs(params, rollout.features, rollout.choices)


# --- supervised (cold-start) training ---------------------------------------------

def sft_step(params: ParamVector, batch: Sequence[Sequence[int]], learning_rate: float,
             policy: TracePolicy | None = None) -> tuple[ParamVector, float]:
    """One descent step on mean per-token NLL; returns (new params, pre-step loss)."""
    policy = policy or TracePolicy()
    if not batch:
        raise ValueError("empty batch")
    Xs, ys = zip(*(policy.modelled(seq) for seq in batch))
    return _nll_step(params, np.concatenate(Xs), np.concatenate(ys), learning_rate)


def bc_step(params: ParamVector, X: np.ndarray, choices, learning_rate: float) -> tuple[ParamVector, float]:
    """Behaviour cloning on (feature row, action index) pairs."""
    return _nll_step(params, np.asarray(X, dtype=float), np.asarray(choices, dtype=int), learning_rate)


def _nll_step(params: ParamVector, X: np.ndarray, y: np.ndarray, lr: float) -> tuple[ParamVector, float]:
    n = len(y)
    logp, g = weighted_log_prob_grad(params, X, y, np.full(n, 1.0 / n))
    loss = float(-logp.mean())
    if lr == 0.0:
        return params, loss
    return params.with_data(params.data + lr * g), loss


def mean_token_nll(params: ParamVector, batch: Sequence[Sequence[int]], policy: TracePolicy | None = None) -> float:
    policy = policy or TracePolicy()
    Xs, ys = zip(*(policy.modelled(seq) for seq in batch))
    return float(-batch_log_probs(params, np.concatenate(Xs), np.concatenate(ys)).mean())


ACTION_INDEX = {name: i for i, name in enumerate(ACTION_NAMES)}
