"""Topic-based publish/subscribe control plane.

The broker is embedded in the controller process rather than being an
external dependency; the topic grammar mirrors MQTT (``+`` single level,
``#`` multi level) so an external broker could be substituted.  Two
implementations share one interface:

* :class:`LocalBus` — in-process dispatch for emulated worlds and tests,
  with a partition switch to simulate unreachable devices.
* :class:`BrokerServer`/:class:`BrokerClient` — length-prefixed JSON over a
  persistent TCP stream for real deployments.

Every published message is wrapped in an envelope carrying
``schema_version``, ``msg_id``, ``sent_ns`` and the topic.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import struct
import uuid

from .vtime import Clock

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# agent control-plane topics
TOPIC_CONFIG = "sting/agents/{device_id}/config"
TOPIC_COMMAND = "sting/agents/{device_id}/command"
TOPIC_STATUS = "sting/agents/{device_id}/status"
TOPIC_RESULTS = "sting/agents/{device_id}/results"
TOPIC_RUN_EVENTS = "sting/run/{run_id}/events"


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT-style topic match: ``+`` one level, ``#`` trailing wildcard."""
    p_parts = pattern.split("/")
    t_parts = topic.split("/")
    for i, p in enumerate(p_parts):
        if p == "#":
            return True
        if i >= len(t_parts):
            return False
        if p != "+" and p != t_parts[i]:
            return False
    return len(p_parts) == len(t_parts)


class _Subscription:
    __slots__ = ("pattern", "callback", "owner")

    def __init__(self, pattern, callback, owner):
        self.pattern = pattern
        self.callback = callback
        self.owner = owner


class LocalBus:
    """In-process pub/sub with deterministic delivery order.

    Messages are dispatched through ``loop.call_soon`` so publishing never
    reenters subscriber code.  ``partition(owner)`` silently drops all
    traffic to and from that owner, emulating a lost device.
    """

    def __init__(self, clock: Clock | None = None):
        self._clock = clock or Clock.running()
        self._loop = asyncio.get_event_loop()
        self._subs: list[_Subscription] = []
        self._partitioned: set[str] = set()
        self._counter = itertools.count()

    def subscribe(self, pattern: str, callback, owner: str | None = None) -> _Subscription:
        sub = _Subscription(pattern, callback, owner)
        self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: _Subscription) -> None:
        if sub in self._subs:
            self._subs.remove(sub)

    def publish(self, topic: str, payload: dict, owner: str | None = None) -> str:
        msg_id = f"m{next(self._counter)}"
        message = {
            "schema_version": SCHEMA_VERSION,
            "msg_id": msg_id,
            "sent_ns": self._clock.now_ns(),
            "topic": topic,
            "payload": payload,
        }
        if owner in self._partitioned:
            return msg_id
        for sub in list(self._subs):
            if sub.owner in self._partitioned:
                continue
            if topic_matches(sub.pattern, topic):
                self._loop.call_soon(self._dispatch, sub, message)
        return msg_id

    def _dispatch(self, sub: _Subscription, message: dict) -> None:
        if sub not in self._subs or sub.owner in self._partitioned:
            return
        try:
            sub.callback(message)
        except Exception:
            log.exception("subscriber for %s failed", sub.pattern)

    def partition(self, owner: str, partitioned: bool = True) -> None:
        if partitioned:
            self._partitioned.add(owner)
        else:
            self._partitioned.discard(owner)


_LENGTH = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024


def _frame(obj: dict) -> bytes:
    body = json.dumps(obj, separators=(",", ":")).encode()
    return _LENGTH.pack(len(body)) + body


async def _read_frame(reader: asyncio.StreamReader) -> dict | None:
    try:
        header = await reader.readexactly(_LENGTH.size)
    except (asyncio.IncompleteReadError, ConnectionResetError):
        return None
    (length,) = _LENGTH.unpack(header)
    if length > MAX_FRAME:
        raise ValueError(f"frame of {length} bytes exceeds limit")
    try:
        body = await reader.readexactly(length)
    except (asyncio.IncompleteReadError, ConnectionResetError):
        return None
    return json.loads(body)


class BrokerServer:
    """Controller-embedded broker; also serves as the controller's bus."""

    def __init__(self, clock: Clock | None = None):
        self._clock = clock or Clock.running()
        self._loop = asyncio.get_event_loop()
        self._local = LocalBus(self._clock)
        self._clients: dict[str, "_ClientSession"] = {}
        self._server: asyncio.AbstractServer | None = None
        self.address = ""

    async def start(self, bind: str = "127.0.0.1:0") -> str:
        host, _, port = bind.rpartition(":")
        self._server = await asyncio.start_server(self._on_client, host, int(port))
        sock = self._server.sockets[0]
        addr = sock.getsockname()
        self.address = f"{addr[0]}:{addr[1]}"
        return self.address

    async def stop(self) -> None:
        for session in list(self._clients.values()):
            session.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    # bus interface -----------------------------------------------------
    def subscribe(self, pattern: str, callback, owner: str | None = None):
        return self._local.subscribe(pattern, callback, owner)

    def unsubscribe(self, sub) -> None:
        self._local.unsubscribe(sub)

    def publish(self, topic: str, payload: dict, owner: str | None = None) -> str:
        msg_id = self._local.publish(topic, payload, owner)
        message = {
            "schema_version": SCHEMA_VERSION,
            "msg_id": msg_id,
            "sent_ns": self._clock.now_ns(),
            "topic": topic,
            "payload": payload,
        }
        self._fanout_remote(message, exclude=None)
        return msg_id

    def partition(self, owner: str, partitioned: bool = True) -> None:
        self._local.partition(owner, partitioned)

    # ---------------------------------------------------------------

    def _fanout_remote(self, message: dict, exclude: "str | None") -> None:
        for client_id, session in list(self._clients.items()):
            if client_id == exclude:
                continue
            if any(topic_matches(p, message["topic"]) for p in session.patterns):
                session.send({"op": "message", "message": message})

    async def _on_client(self, reader, writer) -> None:
        session = _ClientSession(reader, writer)
        self._clients[session.client_id] = session
        try:
            while True:
                obj = await _read_frame(reader)
                if obj is None:
                    break
                op = obj.get("op")
                if op == "subscribe":
                    session.patterns.append(obj["pattern"])
                elif op == "publish":
                    message = {
                        "schema_version": SCHEMA_VERSION,
                        "msg_id": obj.get("msg_id") or f"c{uuid.uuid4().hex[:12]}",
                        "sent_ns": obj.get("sent_ns") or self._clock.now_ns(),
                        "topic": obj["topic"],
                        "payload": obj["payload"],
                    }
                    # deliver to local subscribers and other matching clients
                    for sub in list(self._local._subs):
                        if topic_matches(sub.pattern, message["topic"]):
                            self._loop.call_soon(self._local._dispatch, sub, message)
                    self._fanout_remote(message, exclude=session.client_id)
                elif op == "ping":
                    session.send({"op": "pong"})
        except Exception:
            log.exception("broker client session failed")
        finally:
            self._clients.pop(session.client_id, None)
            session.close()


class _ClientSession:
    def __init__(self, reader, writer):
        self.reader = reader
        self.writer = writer
        self.patterns: list[str] = []
        self.client_id = uuid.uuid4().hex

    def send(self, obj: dict) -> None:
        try:
            self.writer.write(_frame(obj))
        except (ConnectionResetError, RuntimeError):
            pass

    def close(self) -> None:
        try:
            self.writer.close()
        except RuntimeError:
            pass


class BrokerClient:
    """Agent-side connection to the controller's broker."""

    def __init__(self, clock: Clock | None = None):
        self._clock = clock or Clock.running()
        self._subs: list[_Subscription] = []
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._reader_task: asyncio.Task | None = None
        self._counter = itertools.count()
        self.connected = asyncio.Event()
        self.closed = asyncio.Event()

    async def connect(self, address: str) -> None:
        host, _, port = address.rpartition(":")
        self._reader, self._writer = await asyncio.open_connection(host, int(port))
        self.connected.set()
        self._reader_task = asyncio.ensure_future(self._read_loop())

    async def _read_loop(self) -> None:
        assert self._reader is not None
        while True:
            obj = await _read_frame(self._reader)
            if obj is None:
                break
            if obj.get("op") == "message":
                message = obj["message"]
                for sub in list(self._subs):
                    if topic_matches(sub.pattern, message["topic"]):
                        try:
                            sub.callback(message)
                        except Exception:
                            log.exception("subscriber for %s failed", sub.pattern)
        self.connected.clear()
        self.closed.set()

    def subscribe(self, pattern: str, callback, owner: str | None = None) -> _Subscription:
        sub = _Subscription(pattern, callback, owner)
        self._subs.append(sub)
        if self._writer is not None:
            self._writer.write(_frame({"op": "subscribe", "pattern": pattern}))
        return sub

    def unsubscribe(self, sub: _Subscription) -> None:
        if sub in self._subs:
            self._subs.remove(sub)

    def publish(self, topic: str, payload: dict, owner: str | None = None) -> str:
        msg_id = f"a{next(self._counter)}"
        assert self._writer is not None, "not connected"
        self._writer.write(
            _frame(
                {
                    "op": "publish",
                    "topic": topic,
                    "payload": payload,
                    "msg_id": msg_id,
                    "sent_ns": self._clock.now_ns(),
                }
            )
        )
        return msg_id

    async def close(self) -> None:
        if self._reader_task is not None:
            self._reader_task.cancel()
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionResetError, BrokenPipeError):
                pass
