"""TCP environment server speaking length-prefixed canonical JSON.

Frames are a 4-byte big-endian payload length followed by UTF-8 JSON.  The
encoding is canonical (fixed key order, no whitespace, shortest round-trip
floats) so every message has exactly one byte representation and sessions can
be compared bit for bit against in-process runs.

One client at a time; the request/reply lifecycle is

    hello(config overrides) -> config_ack(resolved config)
    reset -> obs
    step(action) -> result(obs, reward, done, info)
    bye -> bye, connection closed

Lifecycle violations (step before reset, step after done, ...) get an error
reply and the connection stays up; undecodable bytes get an error reply and
the connection closes.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from dataclasses import dataclass, field

from .env import EnvConfig, LaneKeepEnv, EpisodeDoneError
from .geometry import BUILTIN_TRACKS, builtin_track

MAX_PAYLOAD = 1 << 20
IDLE_TIMEOUT = 30.0

MESSAGE_TYPES = frozenset(
    {"hello", "config_ack", "reset", "obs", "step", "result", "error", "bye"}
)

_PREFIX = struct.Struct("!I")


class ProtocolError(Exception):
    """Frame or message that cannot be decoded; the connection must close."""


@dataclass(frozen=True)
class Message:
    type: str
    seq: int
    body: dict = field(default_factory=dict)


def encode(msg: Message) -> bytes:
    """Canonical bytes for a message: length prefix + fixed-key-order JSON.

    Key order is type, seq, then body keys alphabetically.  Floats use the
    shortest decimal that round-trips, so encode is a pure function of the
    message value.
    """
    obj = {"type": msg.type, "seq": msg.seq}
    for key in sorted(msg.body):
        obj[key] = msg.body[key]
    payload = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds cap")
    return _PREFIX.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> Message:
    """Parse one frame payload; raises ProtocolError on anything malformed."""
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad JSON payload: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("payload must be a JSON object")
    mtype = obj.pop("type", None)
    seq = obj.pop("seq", None)
    if not isinstance(mtype, str):
        raise ProtocolError("missing or non-string 'type'")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise ProtocolError("missing or invalid 'seq'")
    return Message(mtype, seq, obj)


class StreamDecoder:
    """Incremental frame splitter: feed bytes, pop complete payloads.

    A partial frame is simply held until more bytes arrive; a zero or
    oversized length prefix raises ProtocolError immediately.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def pop(self) -> bytes | None:
        if len(self._buf) < 4:
            return None
        (length,) = _PREFIX.unpack_from(self._buf)
        if length == 0:
            raise ProtocolError("zero-length frame")
        if length > MAX_PAYLOAD:
            raise ProtocolError(f"frame length {length} exceeds cap")
        if len(self._buf) < 4 + length:
            return None
        payload = bytes(self._buf[4 : 4 + length])
        del self._buf[: 4 + length]
        return payload


def decode(data: bytes) -> Message:
    """One-shot decode of a complete frame (prefix + payload)."""
    dec = StreamDecoder()
    dec.feed(data)
    payload = dec.pop()
    if payload is None:
        raise ProtocolError("incomplete frame")
    return decode_payload(payload)


# ---------------------------------------------------------------------------
# session


_CONFIG_FIELDS = ("dt", "max_steps", "noise_sigma", "lam", "speed", "seed")


def _resolve_config(body: dict) -> tuple[str, EnvConfig]:
    track_name = body.get("track", "oval")
    if track_name not in BUILTIN_TRACKS:
        raise ValueError(f"unknown track {track_name!r}")
    kwargs = {}
    for name in _CONFIG_FIELDS:
        if name in body:
            value = body[name]
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ValueError(f"config field {name!r} must be a number")
            kwargs[name] = int(value) if name in ("max_steps", "seed") else float(value)
    return track_name, EnvConfig(**kwargs)


class _Session:
    """Request/reply state machine for one connection."""

    def __init__(self, defaults: dict | None = None):
        self.phase = "awaiting_hello"
        self.defaults = dict(defaults or {})
        self.env = None
        self.track_name = None
        self.episodes = 0
        self.steps = 0
        self._finished = False   # an episode ended and no reset has followed

    def handle(self, msg: Message) -> tuple[Message, bool]:
        """Returns (reply, close_after_reply)."""
        handler = getattr(self, "_on_" + msg.type, None)
        if msg.type not in MESSAGE_TYPES or handler is None:
            return self._error(msg.seq, "parse_error", f"unsupported type {msg.type!r}"), False
        return handler(msg)

    def _error(self, seq: int, code: str, detail: str) -> Message:
        return Message("error", seq, {"code": code, "detail": detail})

    def _on_hello(self, msg: Message):
        if self.phase != "awaiting_hello":
            return self._error(msg.seq, "bad_phase", "hello already exchanged"), False
        merged = dict(self.defaults)
        merged.update(msg.body)
        try:
            self.track_name, config = _resolve_config(merged)
        except ValueError as exc:
            return self._error(msg.seq, "parse_error", str(exc)), False
        track = builtin_track(self.track_name)
        self.env = LaneKeepEnv(track, config)
        self.phase = "idle"
        body = {name: getattr(config, name) for name in _CONFIG_FIELDS}
        body["track"] = self.track_name
        body["half_width"] = track.half_width
        body["obs_dim"] = 7
        return Message("config_ack", msg.seq, body), False

    def _on_reset(self, msg: Message):
        if self.phase not in ("idle", "in_episode"):
            return self._error(msg.seq, "bad_phase", "hello required first"), False
        obs = self.env.reset()
        self.phase = "in_episode"
        self._finished = False
        self.episodes += 1
        return Message("obs", msg.seq, {"obs": [float(x) for x in obs.vector()]}), False

    def _on_step(self, msg: Message):
        if self.phase == "awaiting_hello":
            return self._error(msg.seq, "bad_phase", "hello required first"), False
        if self.phase != "in_episode":
            if self._finished:
                return self._error(msg.seq, "episode_done", "episode finished; reset to continue"), False
            return self._error(msg.seq, "bad_phase", "reset required first"), False
        action = msg.body.get("action")
        if (
            not isinstance(action, list)
            or len(action) != 1
            or not isinstance(action[0], (int, float))
            or isinstance(action[0], bool)
        ):
            return self._error(msg.seq, "parse_error", "action must be a 1-element number list"), False
        a = float(action[0])
        if not -1.0 <= a <= 1.0:
            return self._error(msg.seq, "action_range", f"action {a!r} outside [-1, 1]"), False
        try:
            res = self.env.step(a)
        except EpisodeDoneError:
            return self._error(msg.seq, "episode_done", "episode finished; reset to continue"), False
        self.steps += 1
        if res.done:
            self.phase = "idle"
            self._finished = True
        body = {
            "obs": [float(x) for x in res.obs.vector()],
            "reward": res.reward,
            "done": res.done,
            "info": dict(res.info),
        }
        return Message("result", msg.seq, body), False

    def _on_bye(self, msg: Message):
        self.phase = "closed"
        return Message("bye", msg.seq, {"episodes": self.episodes, "steps": self.steps}), True


def _serve_connection(conn: socket.socket, defaults: dict | None) -> _Session:
    session = _Session(defaults)
    decoder = StreamDecoder()
    conn.settimeout(IDLE_TIMEOUT)
    try:
        while True:
            try:
                payload = decoder.pop()
                if payload is None:
                    data = conn.recv(65536)
                    if not data:
                        return session
                    decoder.feed(data)
                    continue
                msg = decode_payload(payload)
            except ProtocolError as exc:
                conn.sendall(encode(Message("error", 0, {"code": "parse_error", "detail": str(exc)})))
                return session
            reply, close = session.handle(msg)
            conn.sendall(encode(reply))
            if close:
                return session
    except (socket.timeout, ConnectionError, BrokenPipeError):
        return session
    finally:
        conn.close()


class ProtocolServer:
    """Accept loop on its own thread; one session served at a time.

    Pass port 0 to bind an ephemeral port; read it back from ``address``.
    """

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        defaults: dict | None = None,
        on_session=None,
    ):
        self.defaults = defaults
        self.on_session = on_session
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(1)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        try:
            self._sock.settimeout(0.2)
        except OSError:   # stopped before the thread came up
            return
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            session = _serve_connection(conn, self.defaults)
            if self.on_session is not None:
                self.on_session({"episodes": session.episodes, "steps": session.steps})
        self._sock.close()

    def serve_forever(self) -> None:
        """Blocking variant for the CLI; Ctrl-C stops it."""
        self.start()
        try:
            while self._thread.is_alive():
                self._thread.join(0.5)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=5.0)


class EnvClient:
    """Minimal scripted client; used by tests and handy for external agents."""

    def __init__(self, host: str, port: int, timeout: float = IDLE_TIMEOUT):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._decoder = StreamDecoder()
        self._seq = 0

    def request(self, mtype: str, body: dict | None = None) -> Message:
        self._seq += 1
        self._sock.sendall(encode(Message(mtype, self._seq, body or {})))
        reply = self._read()
        if reply.seq != self._seq:
            raise ProtocolError(f"reply seq {reply.seq} != request seq {self._seq}")
        return reply

    def _read(self) -> Message:
        while True:
            payload = self._decoder.pop()
            if payload is not None:
                return decode_payload(payload)
            data = self._sock.recv(65536)
            if not data:
                raise ConnectionError("server closed the connection")
            self._decoder.feed(data)

    def hello(self, **config) -> Message:
        return self.request("hello", config)

    def reset(self) -> Message:
        return self.request("reset")

    def step(self, action: float) -> Message:
        return self.request("step", {"action": [action]})

    def close(self) -> None:
        try:
            self.request("bye")
        except (ProtocolError, ConnectionError, OSError):
            pass
        self._sock.close()
