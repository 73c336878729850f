"""Pluggable datagram transports: emulated shared channel and real UDP.

Both transports present the same surface: ``send(dst, data)`` with a
receive callback ``(src, data, rx_ns)``, datagram semantics (packets arrive
whole or not at all), and string addresses.

The emulated channel is a fluid FIFO single-server queue: every packet from
every attached endpoint is serialized through one shared service rate with a
byte-bounded tail-drop buffer, plus constant propagation delay.  That is
deliberately not an 802.11 MAC model; contention effects (throughput
collapse, queueing delay growth, drops) emerge from the shared capacity
alone.  Addresses on the emulated channel are arbitrary strings (device
ids).  The real transport is a plain UDP socket with ``host:port``
addresses.
"""

from __future__ import annotations

import asyncio
import socket
import time
from collections import deque
from dataclasses import dataclass, field

from .vtime import Clock

NS_PER_S = 1_000_000_000

ReceiveCallback = "Callable[[str, bytes, int], None]"


class UnknownEndpoint(KeyError):
    """Destination address is not attached to the channel."""


@dataclass
class ChannelStats:
    offered_packets: int = 0
    offered_bytes: int = 0
    delivered_packets: int = 0
    delivered_bytes: int = 0
    dropped_packets: int = 0
    dropped_bytes: int = 0


@dataclass(frozen=True)
class Delivery:
    time_ns: int
    src: str
    dst: str
    data: bytes


@dataclass
class _InFlight:
    completion_ns: int
    n_bytes: int


class FifoChannelModel:
    """Shared-capacity FIFO queue with tail drop; pure event arithmetic.

    ``transmit`` enqueues a packet at ``now_ns``; its service completes at
    ``max(now, previous completion) + bytes * 8 / capacity`` and it is
    delivered ``propagation_ns`` later.  A packet that would push the queued
    byte count past ``buffer_bytes`` is dropped on arrival.  ``advance``
    releases deliveries in order, deterministically for deterministic
    arrivals.
    """

    def __init__(
        self,
        capacity_bps: float,
        propagation_ns: int = 0,
        buffer_bytes: int = 524_288,
    ):
        if capacity_bps <= 0:
            raise ValueError("capacity_bps must be positive")
        if buffer_bytes <= 0:
            raise ValueError("buffer_bytes must be positive")
        self.capacity_bps = capacity_bps
        self.propagation_ns = propagation_ns
        self.buffer_bytes = buffer_bytes
        self.stats = ChannelStats()
        self._busy_until_ns = 0
        self._queued_bytes = 0
        self._in_service: deque[_InFlight] = deque()
        self._agenda: deque[Delivery] = deque()

    def _drain_completions(self, now_ns: int) -> None:
        while self._in_service and self._in_service[0].completion_ns <= now_ns:
            self._queued_bytes -= self._in_service.popleft().n_bytes

    def transmit(self, src: str, dst: str, data: bytes, now_ns: int) -> bool:
        """Enqueue one packet; returns False when tail-dropped."""
        n = len(data)
        self.stats.offered_packets += 1
        self.stats.offered_bytes += n
        self._drain_completions(now_ns)
        if self._queued_bytes + n > self.buffer_bytes:
            self.stats.dropped_packets += 1
            self.stats.dropped_bytes += n
            return False
        service_ns = max(1, round(n * 8 * NS_PER_S / self.capacity_bps))
        completion_ns = max(now_ns, self._busy_until_ns) + service_ns
        self._busy_until_ns = completion_ns
        self._queued_bytes += n
        self._in_service.append(_InFlight(completion_ns, n))
        # single server + constant propagation: deliveries stay FIFO-ordered
        self._agenda.append(Delivery(completion_ns + self.propagation_ns, src, dst, data))
        return True

    def next_delivery_ns(self) -> int | None:
        return self._agenda[0].time_ns if self._agenda else None

    def advance(self, until_ns: int) -> list[Delivery]:
        """Release every delivery due at or before ``until_ns``, in order."""
        out = []
        while self._agenda and self._agenda[0].time_ns <= until_ns:
            delivery = self._agenda.popleft()
            self.stats.delivered_packets += 1
            self.stats.delivered_bytes += len(delivery.data)
            out.append(delivery)
        self._drain_completions(until_ns)
        return out

    @property
    def queued_bytes(self) -> int:
        return self._queued_bytes

    def is_busy(self, now_ns: int) -> bool:
        return self._busy_until_ns > now_ns


class EmulatedTransport:
    """One endpoint attached to an :class:`EmulatedChannel`."""

    def __init__(self, channel: "EmulatedChannel", addr: str):
        self._channel = channel
        self.local_addr = addr
        self._receiver = None

    def set_receiver(self, callback) -> None:
        self._receiver = callback

    def send(self, dst: str, data: bytes) -> None:
        self._channel._send(self.local_addr, dst, data)

    def close(self) -> None:
        self._channel.detach(self.local_addr)

    def _deliver(self, src: str, data: bytes, rx_ns: int) -> None:
        if self._receiver is not None:
            self._receiver(src, data, rx_ns)


class EmulatedChannel:
    """Event-driven wrapper gluing the FIFO model to the running loop.

    Endpoints attach under string addresses; sends are synchronous enqueues
    and deliveries fire from loop timers, in virtual or real time depending
    on the loop.
    """

    def __init__(
        self,
        capacity_bps: float,
        propagation_ns: int = 0,
        buffer_bytes: int = 524_288,
        clock: Clock | None = None,
    ):
        self.model = FifoChannelModel(capacity_bps, propagation_ns, buffer_bytes)
        self._clock = clock or Clock.running()
        self._endpoints: dict[str, EmulatedTransport] = {}
        self._timer: asyncio.TimerHandle | None = None
        self._timer_due_ns: int | None = None

    @property
    def stats(self) -> ChannelStats:
        return self.model.stats

    def attach(self, addr: str) -> EmulatedTransport:
        if addr in self._endpoints:
            raise ValueError(f"address {addr!r} already attached")
        endpoint = EmulatedTransport(self, addr)
        self._endpoints[addr] = endpoint
        return endpoint

    def detach(self, addr: str) -> None:
        self._endpoints.pop(addr, None)

    def _send(self, src: str, dst: str, data: bytes) -> None:
        if dst not in self._endpoints:
            raise UnknownEndpoint(dst)
        self.model.transmit(src, dst, data, self._clock.now_ns())
        self._arm_timer()

    def _arm_timer(self) -> None:
        due = self.model.next_delivery_ns()
        if due is None:
            return
        if self._timer is not None and self._timer_due_ns is not None and self._timer_due_ns <= due:
            return
        if self._timer is not None:
            self._timer.cancel()
        self._timer_due_ns = due
        self._timer = self._clock.call_at_ns(due, self._dispatch_due, due)

    def _dispatch_due(self, due_ns: int) -> None:
        self._timer = None
        self._timer_due_ns = None
        until = due_ns if self._clock.is_virtual else max(due_ns, self._clock.now_ns())
        for delivery in self.model.advance(until):
            endpoint = self._endpoints.get(delivery.dst)
            if endpoint is not None:
                endpoint._deliver(delivery.src, delivery.data, delivery.time_ns)
        self._arm_timer()


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


def format_addr(host: str, port: int) -> str:
    return f"{host}:{port}"


class UdpTransport(asyncio.DatagramProtocol):
    """Real UDP socket endpoint with ``host:port`` string addresses."""

    def __init__(self):
        self._transport: asyncio.DatagramTransport | None = None
        self._receiver = None
        self.local_addr = ""

    @classmethod
    async def create(cls, bind: str = "127.0.0.1:0") -> "UdpTransport":
        loop = asyncio.get_running_loop()
        host, port = parse_addr(bind)
        protocol = cls()
        await loop.create_datagram_endpoint(lambda: protocol, local_addr=(host, port))
        return protocol

    def connection_made(self, transport) -> None:
        self._transport = transport
        host, port = transport.get_extra_info("sockname")[:2]
        self.local_addr = format_addr(host, port)

    def datagram_received(self, data: bytes, addr) -> None:
        if self._receiver is not None:
            self._receiver(format_addr(addr[0], addr[1]), data, time.time_ns())

    def set_receiver(self, callback) -> None:
        self._receiver = callback

    def send(self, dst: str, data: bytes) -> None:
        assert self._transport is not None, "transport not started"
        self._transport.sendto(data, parse_addr(dst))

    def close(self) -> None:
        if self._transport is not None:
            self._transport.close()


def resolve_bind_address(preferred: str = "127.0.0.1") -> str:
    """Best local address for agents to advertise on real networks."""
    try:
        probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        probe.connect(("8.8.8.8", 80))
        addr = probe.getsockname()[0]
        probe.close()
        return addr
    except OSError:
        return preferred
