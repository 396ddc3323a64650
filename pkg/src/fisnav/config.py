"""Run configuration: one JSON document plus ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .cot_engine import GeneratorEndpoint
from .fis import FisConfig
from .grpo import GrpoConfig
from .rewards import RewardConfig

OUTPUT_ROOT_ENV = "FISNAV_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "scenes": None,          # directory of scene JSON files; None = bundled
    "suite": "nav4",         # bundled suite name or a JSONL path
    "synth_suite": "all",
    "dataset": None,         # kept-records JSONL used by coldstart
    "output_dir": "runs",
    "task": "navigation",    # navigation | trace
    "max_steps": 48,
    "slow_seed": 0,
    "init_seed": 0,
    "reward": RewardConfig().to_dict(),
    "grpo": {**GrpoConfig().to_dict(), "learning_rate": 0.005, "iterations": 60, "eval_every": 0},
    "fis": FisConfig().to_dict(),
    "generator": GeneratorEndpoint(corruption_rate=0.3).to_dict(),
    "synth": {"budget": 48, "tolerance": None, "workers": 1},
    "coldstart": {"epochs": 200, "learning_rate": 0.5, "batch_size": 0},
    "eval": {"samples": 4, "forced_reference": False, "workers": 1},
    "ablate": {"seeds": [0, 1, 2, 3, 4], "betas": [0.005, 0.01, 0.02, 0.03, 0.05], "eval_samples": 8,
               "beta_seed": 0},
    "serve": {"host": "127.0.0.1", "port": 7860, "delay": 0.0, "frame_timeout": 1.0, "duration": None},
    "client": {"host": "127.0.0.1", "port": 7860, "episodes": 4, "timeout": 5.0, "local": True},
}


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k not in ("request_fields",):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for text in overrides:
        keys, value = parse_override(text)
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config section {'.'.join(keys)!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return cfg


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def reward(self) -> RewardConfig:
        return RewardConfig.from_dict(self.data["reward"])

    @property
    def grpo(self) -> GrpoConfig:
        return GrpoConfig.from_dict({**self.data["grpo"], "seed": self.seed})

    @property
    def fis(self) -> FisConfig:
        return FisConfig.from_dict(self.data["fis"])

    @property
    def generator(self) -> GeneratorEndpoint:
        return GeneratorEndpoint.from_dict(self.data["generator"])

    def section(self, name: str) -> dict:
        return self.data[name]

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.data["output_dir"])

    def run_dir(self, command: str) -> Path:
        return self.output_root() / f"{command}-{self.hash()[:12]}"

    def validate(self) -> "RunConfig":
        d = self.data
        if not isinstance(d.get("seed"), int) or isinstance(d.get("seed"), bool):
            raise ConfigError("seed must be an integer")
        if d["task"] not in ("navigation", "trace"):
            raise ConfigError("task must be 'navigation' or 'trace'")
        for name in ("scenes", "dataset"):
            if d[name] is not None and not Path(d[name]).exists():
                raise ConfigError(f"{name} path {d[name]!r} does not exist")
        if str(d["suite"]).endswith(".jsonl") and not Path(d["suite"]).exists():
            raise ConfigError(f"suite path {d['suite']!r} does not exist")
        try:
            self.reward, self.grpo, self.fis, self.generator  # noqa: B018 - construction validates
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return self


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    data = DEFAULTS
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        if "seed" not in user:
            raise ConfigError("config must set 'seed' explicitly")
        data = _merge(DEFAULTS, user)
    return RunConfig(apply_overrides(data, overrides)).validate()
