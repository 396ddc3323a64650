"""Remote controller loop: an asyncio server hosting the dual-rate controller
behind length-prefixed JSON frames, a blocking robot-side client, and latency
statistics.

Wire format: every frame is a 4-byte big-endian unsigned payload length
followed by that many bytes of UTF-8 JSON (one object).  Requests carry
``session_id, step, observation, client_send_time`` (plus ``instruction`` on a
session's first frame); replies carry ``session_id, step, actions,
latent_step, server_receive_time, server_send_time`` or, on rejection,
``error: {code, message}`` with whatever of ``session_id``/``step`` could be
read.
"""

from __future__ import annotations

import asyncio
import json
import math
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .fis import FisConfig, SlowSchedule
from .geometry import ACTIONS, Action, Episode, EpisodeSim, ObservationVector, Scene
from .grpo import derive_seed
from .policy import NavPolicy, ParamVector, forward, sample_index

HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 20
ERROR_CODES = ("malformed", "invalid-frame", "out-of-order", "shape", "too-large", "truncated")


class ProtocolError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


class BindError(OSError):
    pass


class ConnectionClosed(ConnectionError):
    pass


# --- frames -----------------------------------------------------------------

@dataclass(frozen=True)
class ObservationFrame:
    session_id: str
    step: int
    observation: ObservationVector
    client_send_time: int
    instruction: str | None = None

    def to_dict(self) -> dict:
        d = {"session_id": self.session_id, "step": self.step, "observation": self.observation.to_list(),
             "client_send_time": self.client_send_time}
        if self.instruction is not None:
            d["instruction"] = self.instruction
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationFrame":
        sid, step, obs, sent = (d.get(k) for k in ("session_id", "step", "observation", "client_send_time"))
        if not isinstance(sid, str) or not sid:
            raise ProtocolError("invalid-frame", "session_id must be a non-empty string")
        if not _is_count(step):
            raise ProtocolError("invalid-frame", "step must be a non-negative integer")
        if not _is_count(sent):
            raise ProtocolError("invalid-frame", "client_send_time must be a non-negative integer")
        if not isinstance(obs, list) or not all(_is_real(v) for v in obs):
            raise ProtocolError("invalid-frame", "observation must be a list of finite numbers")
        if len(obs) < 4:
            raise ProtocolError("shape", "observation vector too short")
        instr = d.get("instruction")
        if instr is not None and not isinstance(instr, str):
            raise ProtocolError("invalid-frame", "instruction must be a string")
        return cls(sid, step, ObservationVector.from_list(obs), sent, instr)


@dataclass(frozen=True)
class ActionFrame:
    session_id: str
    step: int
    actions: tuple[str, ...]
    latent_step: int
    server_receive_time: int
    server_send_time: int

    def to_dict(self) -> dict:
        return {"session_id": self.session_id, "step": self.step, "actions": list(self.actions),
                "latent_step": self.latent_step, "server_receive_time": self.server_receive_time,
                "server_send_time": self.server_send_time}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionFrame":
        try:
            actions = tuple(Action(a).value for a in d["actions"])
            return cls(str(d["session_id"]), int(d["step"]), actions, int(d["latent_step"]),
                       int(d["server_receive_time"]), int(d["server_send_time"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError("invalid-frame", f"bad action frame: {exc}") from None


def _is_count(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _is_real(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def encode_payload(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_frame(obj: dict) -> bytes:
    payload = encode_payload(obj)
    if len(payload) > MAX_FRAME:
        raise ProtocolError("too-large", f"payload of {len(payload)} bytes")
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> dict:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError("malformed", str(exc)) from None
    if not isinstance(obj, dict):
        raise ProtocolError("malformed", "payload is not a JSON object")
    return obj


def decode_frame(data: bytes) -> tuple[dict, bytes]:
    """Decode one frame from the front of ``data``; returns it and the rest."""
    if len(data) < HEADER.size:
        raise ProtocolError("truncated", "incomplete header")
    (n,) = HEADER.unpack_from(data)
    if n > MAX_FRAME:
        raise ProtocolError("too-large", f"declared length {n}")
    if len(data) < HEADER.size + n:
        raise ProtocolError("truncated", f"expected {n} payload bytes, got {len(data) - HEADER.size}")
    return decode_payload(data[HEADER.size: HEADER.size + n]), data[HEADER.size + n:]


def error_frame(exc: ProtocolError, session_id: str | None = None, step: int | None = None) -> dict:
    d: dict = {"error": {"code": exc.code, "message": exc.message}}
    if session_id is not None:
        d["session_id"] = session_id
    if step is not None:
        d["step"] = step
    return d


# --- server -----------------------------------------------------------------

@dataclass
class Session:
    schedule: SlowSchedule
    rng: np.random.Generator
    last_step: int = -1
    history: list[ObservationVector] = field(default_factory=list)
    done: bool = False


class Controller:
    """Per-session dual-rate state plus the pure chunk computation.

    Each reply holds up to H actions drawn open loop from the frame's
    observation and ends at the next slow boundary, so every action in a
    chunk runs under the same latent (``latent_step = n * (step // n)``).
    """

    def __init__(self, slow_params: ParamVector, fast_params: ParamVector, cfg: FisConfig, seed: int = 0,
                 policy: NavPolicy | None = None):
        self.slow_params = slow_params
        self.fast_params = fast_params
        self.cfg = cfg
        self.seed = seed
        self.policy = policy or NavPolicy(latent_width=cfg.latent_width)
        self.sessions: dict[str, Session] = {}

    def _session(self, frame: ObservationFrame) -> Session:
        s = self.sessions.get(frame.session_id)
        if s is None:
            schedule = SlowSchedule(self.slow_params, self.cfg, frame.instruction or "")
            s = Session(schedule, np.random.default_rng(derive_seed(self.seed, "session", frame.session_id)))
            self.sessions[frame.session_id] = s
        return s

    def chunk_length(self, step: int) -> int:
        n = 1 if self.cfg.mode == "slow_only" else self.cfg.n
        return max(1, min(self.cfg.H, n - step % n))

    def handle(self, frame: ObservationFrame) -> tuple[tuple[str, ...], int]:
        if frame.observation.width != self.policy.obs_width:
            raise ProtocolError("shape", f"observation width {frame.observation.width}, "
                                         f"expected {self.policy.obs_width}")
        s = self._session(frame)
        if frame.step <= s.last_step:
            raise ProtocolError("out-of-order", f"step {frame.step} after {s.last_step}")
        s.last_step = frame.step
        s.history.append(frame.observation)
        h, produced = s.schedule(s.history, frame.step)
        x = self.policy.features(frame.observation, h)
        probs = np.exp(forward(self.fast_params, x)[1][0])
        actions: list[str] = []
        for _ in range(self.chunk_length(frame.step)):
            a = ACTIONS[sample_index(probs, s.rng.random())]
            actions.append(a.value)
            if a is Action.STOP:
                break
        return tuple(actions), produced


@dataclass
class ServerStats:
    frames: int = 0
    errors: int = 0
    connections: int = 0


class FisServer:
    def __init__(self, controller: Controller, delay: float = 0.0, frame_timeout: float = 1.0):
        self.controller = controller
        self.delay = delay
        self.frame_timeout = frame_timeout
        self.stats = ServerStats()
        self._server: asyncio.base_events.Server | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        try:
            self._server = await asyncio.start_server(self._connection, host, port)
        except OSError as exc:
            raise BindError(exc.errno, f"cannot bind {host}:{port}: {exc.strerror}") from None
        return self._server.sockets[0].getsockname()[:2]

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _read_exact(self, reader: asyncio.StreamReader, n: int, first: bool) -> bytes | None:
        """Read ``n`` bytes.  Returns None on clean EOF before a frame starts;
        raises ProtocolError('truncated') when a started frame stalls (the
        partial bytes are discarded) and ConnectionClosed on EOF mid-frame."""
        buf = bytearray()
        loop = asyncio.get_running_loop()
        deadline = None
        while len(buf) < n:
            if deadline is None and (buf or not first):
                deadline = loop.time() + self.frame_timeout
            timeout = None if deadline is None else max(deadline - loop.time(), 0.0)
            try:
                chunk = await asyncio.wait_for(reader.read(n - len(buf)), timeout)
            except asyncio.TimeoutError:
                raise ProtocolError("truncated", f"frame stalled after {len(buf)} of {n} bytes") from None
            if not chunk:
                if not buf and first:
                    return None
                raise ConnectionClosed("peer closed mid-frame")
            buf.extend(chunk)
        return bytes(buf)

    async def _discard(self, reader: asyncio.StreamReader, n: int) -> None:
        """Skip an oversized payload so the stream stays framed; gives up
        quietly if the sender stalls."""
        left = n
        while left:
            try:
                chunk = await asyncio.wait_for(reader.read(min(left, 1 << 16)), self.frame_timeout)
            except asyncio.TimeoutError:
                return
            if not chunk:
                raise ConnectionClosed("peer closed mid-frame")
            left -= len(chunk)

    async def _connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.stats.connections += 1
        try:
            while True:
                try:
                    header = await self._read_exact(reader, HEADER.size, first=True)
                    if header is None:
                        break
                    (n,) = HEADER.unpack(header)
                    if n > MAX_FRAME:
                        await self._discard(reader, n)
                        raise ProtocolError("too-large", f"declared length {n}")
                    payload = await self._read_exact(reader, n, first=False)
                    received = time.monotonic_ns()
                    reply = self._reply(payload, received)
                except ProtocolError as exc:
                    self.stats.errors += 1
                    reply = error_frame(exc)
                if self.delay:
                    await asyncio.sleep(self.delay)
                writer.write(encode_frame(reply))
                await writer.drain()
        except (ConnectionClosed, ConnectionError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass

    def _reply(self, payload: bytes, received: int) -> dict:
        d = decode_payload(payload)
        sid = d.get("session_id") if isinstance(d.get("session_id"), str) else None
        step = d.get("step") if _is_count(d.get("step")) else None
        try:
            frame = ObservationFrame.from_dict(d)
            actions, latent_step = self.controller.handle(frame)
        except ProtocolError as exc:
            self.stats.errors += 1
            return error_frame(exc, sid, step)
        self.stats.frames += 1
        return ActionFrame(frame.session_id, frame.step, actions, latent_step, received,
                           time.monotonic_ns()).to_dict()


class ServerThread:
    """Runs a FisServer on a private event loop in a daemon thread."""

    def __init__(self, controller: Controller, host: str = "127.0.0.1", port: int = 0, delay: float = 0.0,
                 frame_timeout: float = 1.0):
        self.server = FisServer(controller, delay, frame_timeout)
        self.host, self.port = host, port
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.address: tuple[str, int] | None = None

    def __enter__(self) -> "ServerThread":
        self.thread.start()
        fut = asyncio.run_coroutine_threadsafe(self.server.start(self.host, self.port), self.loop)
        try:
            self.address = fut.result(timeout=10)
        except BaseException:
            self._stop()
            raise
        return self

    def _stop(self) -> None:
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(timeout=10)
        self.loop.close()

    def __exit__(self, *exc) -> None:
        asyncio.run_coroutine_threadsafe(self.server.close(), self.loop).result(timeout=10)
        self._stop()


def serve(bind_address: tuple[str, int], controller: Controller, delay: float = 0.0) -> ServerThread:
    """Start a server and return its running handle (use as a context manager
    or call ``__exit__`` to stop)."""
    return ServerThread(controller, bind_address[0], bind_address[1], delay).__enter__()


# --- client -----------------------------------------------------------------

@dataclass(frozen=True)
class LatencySample:
    round_trip: int
    server_compute: int

    def __post_init__(self) -> None:
        if self.server_compute < 0 or self.server_compute > self.round_trip:
            raise ValueError("server_compute must lie in [0, round_trip]")


class FisClient:
    """Blocking request/response client over one TCP connection."""

    def __init__(self, address: tuple[str, int], timeout: float = 5.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.samples: list[LatencySample] = []

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "FisClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except socket.timeout:
                raise TimeoutError("no reply from server") from None
            if not chunk:
                raise ConnectionClosed("server closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv_frame(self) -> dict:
        (n,) = HEADER.unpack(self._recv_exact(HEADER.size))
        return decode_payload(self._recv_exact(n))

    def request_actions(self, frame: ObservationFrame) -> ActionFrame:
        frame = ObservationFrame(frame.session_id, frame.step, frame.observation, time.monotonic_ns(),
                                 frame.instruction)
        self.send_raw(encode_frame(frame.to_dict()))
        reply = self.recv_frame()
        arrived = time.monotonic_ns()
        if "error" in reply:
            err = reply["error"]
            raise ProtocolError(err.get("code", "malformed"), err.get("message", ""))
        out = ActionFrame.from_dict(reply)
        if out.session_id != frame.session_id or out.step != frame.step:
            raise ProtocolError("invalid-frame", "reply does not echo the request")
        compute = out.server_send_time - out.server_receive_time
        rtt = arrived - frame.client_send_time
        self.samples.append(LatencySample(rtt, min(max(compute, 0), rtt)))
        return out


@dataclass
class RemoteEpisode:
    session_id: str
    log: list[dict]
    trajectory: Any
    samples: list[LatencySample]


def run_remote_episode(client: FisClient, session_id: str, episode: Episode, scene: Scene, budget: int,
                       n_rays: int = 16) -> RemoteEpisode:
    """Thin robot loop: sense, send, execute the returned chunk, repeat."""
    sim = EpisodeSim(episode, scene, budget, n_rays=n_rays)
    log: list[dict] = []
    start = len(client.samples)
    first = True
    while not sim.done:
        frame = ObservationFrame(session_id, sim.step_index, sim.observation(), 0,
                                 episode.instruction if first else None)
        first = False
        reply = client.request_actions(frame)
        log.append({"step": reply.step, "actions": list(reply.actions), "latent_step": reply.latent_step})
        if not reply.actions:
            break
        for a in reply.actions:
            if sim.done:
                break
            sim.apply(a)
    return RemoteEpisode(session_id, log, sim.trajectory, client.samples[start:])


# --- latency ----------------------------------------------------------------

@dataclass(frozen=True)
class LatencyReport:
    mean: float
    p50: float
    p95: float
    max: float
    count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "p50": self.p50, "p95": self.p95, "max": self.max, "count": self.count}


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    k = max(1, math.ceil(q * len(sorted_values)))
    return float(sorted_values[k - 1])


def latency_report(samples: Sequence[LatencySample]) -> LatencyReport:
    """Order statistics of round-trip times (nanoseconds); percentiles by
    nearest rank."""
    if not samples:
        raise ValueError("no latency samples")
    rtt = sorted(s.round_trip for s in samples)
    return LatencyReport(float(np.mean(rtt)), nearest_rank(rtt, 0.5), nearest_rank(rtt, 0.95), float(rtt[-1]),
                         len(rtt))


def latency_table(rows: Sequence[tuple[str, str, LatencyReport]]) -> str:
    """Method x location table in milliseconds."""
    head = ["Method", "Location", "Mean (ms)", "p50 (ms)", "p95 (ms)", "Max (ms)"]
    body = [[m, loc, *(f"{v / 1e6:.3f}" for v in (r.mean, r.p50, r.p95, r.max))] for m, loc, r in rows]
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(head), "-" * len(fmt(head)), *map(fmt, body)]) + "\n"


def samples_jsonl(samples: Sequence[LatencySample]) -> str:
    return "".join(json.dumps({"round_trip": s.round_trip, "server_compute": s.server_compute}) + "\n"
                   for s in samples)
