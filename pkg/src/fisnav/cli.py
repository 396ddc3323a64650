"""Command-line entry point: synth, coldstart, train, eval, ablate, serve,
client, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bundle import bundled_scenes, bundled_suite
from .coldstart import coldstart_nav, coldstart_trace, nav_examples, trace_sequences
from .config import ConfigError, RunConfig, load_config
from .cot_engine import GeneratorUnavailable, SynthesisStats, load_dataset, synthesize_dataset
from .fis import init_slow, run_episode
from .geometry import Episode, Scene, load_episodes, load_scenes, reference_actions
from .grpo import GrpoConfig, NavTask, TraceTask, TrainReport, derive_seed, evaluate_success, train
from .metrics import MetricReport, aggregate, evaluate_trajectory, format_table, report_lines
from .policy import NavPolicy, ParamVector, TracePolicy, load_params, save_params
from .rewards import REWARD_GROUPS, RewardConfig
from .serve import Controller, FisClient, ServerThread, latency_report, latency_table, run_remote_episode, samples_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


# --- shared plumbing ----------------------------------------------------------------

def _scenes(cfg: RunConfig) -> dict[str, Scene]:
    return load_scenes(cfg.data["scenes"]) if cfg.data["scenes"] else bundled_scenes()


def _suite(cfg: RunConfig, key: str = "suite") -> list[Episode]:
    name = str(cfg.data[key])
    return load_episodes(name) if name.endswith(".jsonl") else bundled_suite(name)


def _policy(cfg: RunConfig) -> NavPolicy | TracePolicy:
    if cfg.data["task"] == "trace":
        return TracePolicy()
    return NavPolicy(latent_width=cfg.fis.latent_width)


def _task(cfg: RunConfig, scenes: dict[str, Scene]):
    if cfg.data["task"] == "trace":
        return TraceTask(scenes, TracePolicy())
    return NavTask(scenes, init_slow(cfg.data["slow_seed"], latent_width=cfg.fis.latent_width), cfg.fis,
                   _policy(cfg), cfg.data["max_steps"])


class Run:
    """Output directory for one command; ``finish`` writes the manifest."""

    def __init__(self, cfg: RunConfig, command: str, out: Path | None = None):
        self.cfg = cfg
        self.command = command
        self.dir = Path(out) if out else cfg.run_dir(command)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.inputs: dict[str, str] = {}

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def write(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return p

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "config": self.cfg.data,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "inputs": self.inputs,
            "outputs": sorted(set(self.outputs)),
            "version": __version__,
        }
        p = self.dir / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _text_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).rjust(w) for c, w in zip(r, widths))
    return "\n".join([fmt(header), "-" * len(fmt(header)), *map(fmt, rows)]) + "\n"


def _load_checkpoint(path: str | None, cfg: RunConfig) -> ParamVector:
    if path is None:
        return _policy(cfg).init(cfg.data["init_seed"])
    params, _ = load_params(path)
    return params


# --- commands ---------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path | None = None) -> SynthesisStats:
    run = Run(cfg, "synth", out)
    s = cfg.section("synth")
    stats = synthesize_dataset(_suite(cfg, "synth_suite"), cfg.generator, run.path("dataset.jsonl"), _scenes(cfg),
                               budget=s["budget"], tolerance=s["tolerance"], workers=s["workers"])
    run.write("stats.json", json.dumps(stats.to_dict(), indent=2) + "\n")
    run.finish()
    print(json.dumps(stats.to_dict()))
    return stats


def coldstart(cfg: RunConfig, records: list[dict]) -> tuple[ParamVector, list[float]]:
    cs = cfg.section("coldstart")
    policy = _policy(cfg)
    init = policy.init(cfg.data["init_seed"])
    if cfg.data["task"] == "trace":
        seqs = trace_sequences(records, policy)
        bs = cs["batch_size"] or len(seqs)
        losses = []
        params = init
        for _ in range(cs["epochs"]):
            for i in range(0, len(seqs), bs):
                params, loss = coldstart_trace(params, seqs[i:i + bs], 1, cs["learning_rate"], policy)
                losses.extend(loss)
        return params, losses
    scenes = _scenes(cfg)
    slow = init_slow(cfg.data["slow_seed"], latent_width=cfg.fis.latent_width)
    X, y = nav_examples(records, _suite(cfg), scenes, slow, cfg.fis, policy, cfg.data["max_steps"])
    return coldstart_nav(init, X, y, cs["epochs"], cs["learning_rate"])


def cmd_coldstart(cfg: RunConfig, dataset: str | None = None, out: Path | None = None) -> Path:
    dataset = dataset or cfg.data["dataset"]
    if dataset is None:
        raise ConfigError("coldstart needs a dataset (flag --dataset or config 'dataset')")
    if not Path(dataset).exists():
        raise ConfigError(f"dataset {dataset!r} does not exist")
    run = Run(cfg, "coldstart", out)
    run.inputs["dataset"] = str(dataset)
    params, losses = coldstart(cfg, load_dataset(dataset))
    ckpt = run.path("coldstart.params")
    save_params(params, ckpt, {"task": cfg.data["task"], "config_hash": cfg.hash()})
    run.write("losses.json", json.dumps(losses) + "\n")
    run.finish()
    print(f"cold start: loss {losses[0]:.4f} -> {losses[-1]:.4f}; checkpoint {ckpt}")
    return ckpt


def run_training(cfg: RunConfig, init: ParamVector, reward: RewardConfig | None = None,
                 grpo: GrpoConfig | None = None, log=None) -> TrainReport:
    scenes = _scenes(cfg)
    suite = _suite(cfg)
    return train(grpo or cfg.grpo, reward or cfg.reward, suite, init, _task(cfg, scenes), log=log)


def cmd_train(cfg: RunConfig, init_checkpoint: str | None = None, out: Path | None = None) -> TrainReport:
    run = Run(cfg, "train", out)
    if init_checkpoint:
        run.inputs["init_checkpoint"] = str(init_checkpoint)
    init = _load_checkpoint(init_checkpoint, cfg)
    with open(run.path("train_log.jsonl"), "w", encoding="utf-8") as log:
        report = run_training(cfg, init, log=log)
    ckpt = run.path("final.params")
    save_params(report.final_params, ckpt, {"task": cfg.data["task"], "config_hash": cfg.hash()})
    report.checkpoint = str(ckpt)
    last = report.rows[-1]
    run.write("summary.json", json.dumps({"final_kl": report.final_kl, **last}, indent=2, sort_keys=True) + "\n")
    run.finish()
    print(f"trained {len(report.rows)} iterations: mean reward {last['mean_reward']:.4f}, "
          f"train SR {last['train_success']:.3f}, KL {report.final_kl:.4f}; checkpoint {ckpt}")
    return report


def evaluate(cfg: RunConfig, params: ParamVector | None, forced_reference: bool = False,
             samples: int | None = None, workers: int = 1) -> list[tuple[str, MetricReport]]:
    """Roll out every episode through the dual-rate controller and score it.
    With ``forced_reference`` the reference actions are replayed instead."""
    scenes = _scenes(cfg)
    suite = [ep for ep in _suite(cfg) if ep.task_kind == "navigation"]
    policy = NavPolicy(latent_width=cfg.fis.latent_width)
    slow = init_slow(cfg.data["slow_seed"], latent_width=cfg.fis.latent_width)
    fast = params if params is not None else policy.init(cfg.data["init_seed"])
    samples = 1 if forced_reference else (samples or cfg.section("eval")["samples"])
    jobs = [(ep, j) for ep in suite for j in range(samples)]

    def one(job):
        ep, j = job
        scene = scenes[ep.scene_id]
        if forced_reference:
            forced = reference_actions(ep, scene)
            log = run_episode(ep, cfg.fis, slow, fast, max(len(forced), cfg.data["max_steps"]), 0, scene=scene,
                              policy=policy, stop_on_arrival=False, forced_actions=forced)
        else:
            log = run_episode(ep, cfg.fis, slow, fast, cfg.data["max_steps"], derive_seed(cfg.seed, "eval", ep.id, j),
                              scene=scene, policy=policy)
        return f"{ep.id}#{j}", evaluate_trajectory(log.trajectory, ep, scene)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, out: Path | None = None,
             forced_reference: bool | None = None) -> str:
    forced = cfg.section("eval")["forced_reference"] if forced_reference is None else forced_reference
    run = Run(cfg, "eval", out)
    if checkpoint:
        run.inputs["checkpoint"] = str(checkpoint)
    params = None if forced else _load_checkpoint(checkpoint, cfg)
    items = evaluate(cfg, params, forced, workers=cfg.section("eval")["workers"])
    per_episode: dict[str, list[MetricReport]] = {}
    for key, rep in items:
        per_episode.setdefault(key.split("#")[0], []).append(rep)
    rows = [(ep_id, aggregate(reps)) for ep_id, reps in per_episode.items()]
    rows.append(("mean", aggregate([r for _, r in items])))
    table = format_table(rows, label="Episode")
    run.write("metrics.txt", table)
    run.write("metrics.csv", _csv(["episode", "NE", "OS", "SR", "SPL", "nDTW"],
                                  [[n, *(f"{v[c]:.6f}" for c in ("NE", "OS", "SR", "SPL", "nDTW"))] for n, v in rows]))
    run.write("episodes.jsonl", "".join(line + "\n" for line in report_lines(items)))
    run.finish()
    print(table, end="")
    return table


# --- ablations ----------------------------------------------------------------------

def reward_grid() -> list[frozenset[str]]:
    """All 2^3 enable-flag combinations, in binary order over (format,
    understanding, navigation)."""
    rows = []
    for mask in range(8):
        rows.append(frozenset(g for i, g in enumerate(REWARD_GROUPS) if mask >> (2 - i) & 1))
    return rows


def _eval_sr_spl(cfg: RunConfig, params: ParamVector, seed: int) -> tuple[float, float]:
    c = RunConfig({**cfg.data, "seed": seed})
    items = evaluate(c, params, samples=cfg.section("ablate")["eval_samples"])
    agg = aggregate([r for _, r in items])
    return agg["SR"], agg["SPL"]


def ablate(cfg: RunConfig, init: ParamVector, log=None) -> tuple[list[dict], list[dict]]:
    a = cfg.section("ablate")
    base = cfg.reward
    grid_rows = []
    for enabled in reward_grid():
        srs, spls = [], []
        for seed in a["seeds"]:
            if enabled:
                reward = RewardConfig(base.k_path, base.k_end, base.path_metric, enabled)
                report = run_training(cfg, init, reward, GrpoConfig.from_dict({**cfg.data["grpo"], "seed": seed}))
                params = report.final_params
            else:
                params = init  # no reward signal: nothing to optimise
            sr, spl_ = _eval_sr_spl(cfg, params, seed)
            srs.append(sr)
            spls.append(spl_)
        row = {"enabled": sorted(enabled), "SR": float(np.mean(srs)), "SPL": float(np.mean(spls))}
        grid_rows.append(row)
        if log:
            log(json.dumps(row))
    beta_rows = []
    for beta in a["betas"]:
        g = GrpoConfig.from_dict({**cfg.data["grpo"], "seed": a["beta_seed"], "kl_beta": beta})
        report = run_training(cfg, init, None, g)
        sr, spl_ = _eval_sr_spl(cfg, report.final_params, a["beta_seed"])
        row = {"beta": beta, "SR": sr, "SPL": spl_, "KL": report.final_kl}
        beta_rows.append(row)
        if log:
            log(json.dumps(row))
    return grid_rows, beta_rows


def reward_table(rows: Sequence[dict]) -> tuple[str, str]:
    header = ["Format", "Understanding", "Navigation", "SR", "SPL"]
    body = [[("yes" if g in r["enabled"] else "-") for g in REWARD_GROUPS] + [f"{100 * r['SR']:.1f}",
                                                                               f"{100 * r['SPL']:.1f}"]
            for r in rows]
    return _text_table(header, body), _csv(header, body)


def beta_table(rows: Sequence[dict]) -> tuple[str, str]:
    header = ["beta", "SR", "SPL", "KL"]
    body = [[f"{r['beta']:g}", f"{100 * r['SR']:.1f}", f"{100 * r['SPL']:.1f}", f"{r['KL']:.4f}"] for r in rows]
    return _text_table(header, body), _csv(header, body)


def cmd_ablate(cfg: RunConfig, init_checkpoint: str | None = None, out: Path | None = None) -> tuple[str, str]:
    if cfg.data["task"] != "navigation":
        raise ConfigError("ablate runs on the navigation task")
    run = Run(cfg, "ablate", out)
    if init_checkpoint:
        run.inputs["init_checkpoint"] = str(init_checkpoint)
    init = _load_checkpoint(init_checkpoint, cfg)
    lines: list[str] = []
    grid, betas = ablate(cfg, init, log=lines.append)
    rt, rc = reward_table(grid)
    bt, bc = beta_table(betas)
    run.write("reward_grid.txt", rt)
    run.write("reward_grid.csv", rc)
    run.write("beta_sweep.txt", bt)
    run.write("beta_sweep.csv", bc)
    run.write("ablate.jsonl", "".join(line + "\n" for line in lines))
    run.finish()
    print(rt + "\n" + bt, end="")
    return rt, bt


# --- serve / client -----------------------------------------------------------------

def _controller(cfg: RunConfig, checkpoint: str | None) -> Controller:
    policy = NavPolicy(latent_width=cfg.fis.latent_width)
    fast = load_params(checkpoint)[0] if checkpoint else policy.init(cfg.data["init_seed"])
    slow = init_slow(cfg.data["slow_seed"], latent_width=cfg.fis.latent_width)
    return Controller(slow, fast, cfg.fis, cfg.seed, policy)


def cmd_serve(cfg: RunConfig, checkpoint: str | None = None) -> None:
    s = cfg.section("serve")
    with ServerThread(_controller(cfg, checkpoint), s["host"], s["port"], s["delay"], s["frame_timeout"]) as srv:
        host, port = srv.address
        print(f"serving on {host}:{port} (n={cfg.fis.n}, H={cfg.fis.H})", flush=True)
        try:
            if s["duration"] is None:
                while True:
                    time.sleep(3600)
            time.sleep(float(s["duration"]))
        except KeyboardInterrupt:
            pass


def cmd_client(cfg: RunConfig, checkpoint: str | None = None, out: Path | None = None) -> str:
    c = cfg.section("client")
    run = Run(cfg, "client", out)
    scenes = _scenes(cfg)
    suite = [ep for ep in _suite(cfg) if ep.task_kind == "navigation"][: c["episodes"]]

    def drive(address):
        samples, logs = [], []
        with FisClient(address, c["timeout"]) as client:
            for i, ep in enumerate(suite):
                res = run_remote_episode(client, f"{ep.id}#{i}", ep, scenes[ep.scene_id], cfg.data["max_steps"])
                logs.append({"session_id": res.session_id, "log": res.log})
                samples.extend(res.samples)
        return samples, logs

    if c["local"]:
        s = cfg.section("serve")
        with ServerThread(_controller(cfg, checkpoint), "127.0.0.1", 0, s["delay"], s["frame_timeout"]) as srv:
            samples, logs = drive(srv.address)
        location = "loopback"
    else:
        samples, logs = drive((c["host"], c["port"]))
        location = f"{c['host']}:{c['port']}"
    rep = latency_report(samples)
    table = latency_table([(f"dual n={cfg.fis.n} H={cfg.fis.H}", location, rep)])
    run.write("latency.txt", table)
    run.write("latency_samples.jsonl", samples_jsonl(samples))
    run.write("sessions.jsonl", "".join(json.dumps(l) + "\n" for l in logs))
    run.finish()
    print(table, end="")
    return table


def cmd_report(run_dir: str) -> str:
    d = Path(run_dir)
    manifest = d / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"{run_dir} has no manifest.json")
    m = json.loads(manifest.read_text(encoding="utf-8"))
    parts = [f"command: {m['command']}  seed: {m['seed']}  config: {m['config_hash'][:12]}\n"]
    for name in m["outputs"]:
        if name.endswith(".txt") or name == "stats.json" or name == "summary.json":
            parts.append(f"\n== {name}\n" + (d / name).read_text(encoding="utf-8"))
    text = "".join(parts)
    print(text, end="")
    return text


# --- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fisnav", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        if name != "report":
            sp.add_argument("-c", "--config", help="JSON config file (defaults apply when omitted)")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config value, e.g. grpo.kl_beta=0.05")
            sp.add_argument("-o", "--out", help="run directory (default: <output root>/<command>-<config hash>)")
        return sp

    add("synth", "synthesize and filter the reasoning-trace dataset")
    add("coldstart", "supervised cold start from a dataset").add_argument("--dataset")
    add("train", "GRPO training").add_argument("--init", help="initial checkpoint")
    sp = add("eval", "evaluate a checkpoint on the suite")
    sp.add_argument("--checkpoint")
    sp.add_argument("--forced-reference", action="store_true", help="replay the reference actions")
    add("ablate", "reward-decomposition grid and KL-penalty sweep").add_argument("--init")
    add("serve", "run the controller server").add_argument("--checkpoint")
    add("client", "drive episodes against a server and report latency").add_argument("--checkpoint")
    sub.add_parser("report", help="print the tables of a finished run").add_argument("run_dir")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.run_dir)
            return EXIT_OK
        cfg = load_config(args.config, args.set)
        out = Path(args.out) if args.out else None
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "coldstart":
            cmd_coldstart(cfg, args.dataset, out)
        elif args.command == "train":
            cmd_train(cfg, args.init, out)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, out, True if args.forced_reference else None)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.init, out)
        elif args.command == "serve":
            cmd_serve(cfg, args.checkpoint)
        elif args.command == "client":
            cmd_client(cfg, args.checkpoint, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeneratorUnavailable, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
