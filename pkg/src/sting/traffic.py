"""Flow specifications and deterministic packet-departure schedules.

A device profile aggregates several application flows; each flow describes a
traffic pattern (constant stream, periodic sensor, bursty transfer or
fragmented video frames) plus a direction and an RNG seed.  A
:class:`Schedule` merges the per-flow departure processes of one profile into
a single non-decreasing stream of :class:`Departure` events, reproducible
byte-for-byte from the seeds.

Rates count datagram payload bits only (the 48-byte probe header is part of
the datagram, UDP/IP overhead is not).  The PRNG is Python's Mersenne Twister
(``random.Random``), seeded per flow.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from dataclasses import dataclass, field

from .probes import HEADER_LEN, MAX_DATAGRAM

# marks every packet due after the per-flow echo timer as an EchoRequest
DEFAULT_ECHO_INTERVAL_S = 0.1

NS_PER_S = 1_000_000_000


class InvalidFlowSpec(ValueError):
    """Flow or profile configuration violates a documented bound."""


class FlowKind:
    CONSTANT_STREAM = "constant_stream"
    PERIODIC_SENSOR = "periodic_sensor"
    BURSTY_TRANSFER = "bursty_transfer"
    FRAME_VIDEO = "frame_video"

    ALL = (CONSTANT_STREAM, PERIODIC_SENSOR, BURSTY_TRANSFER, FRAME_VIDEO)


class Direction:
    UPLINK = "uplink"      # agent -> controller
    DOWNLINK = "downlink"  # controller -> agent

    ALL = (UPLINK, DOWNLINK)


@dataclass(frozen=True)
class Deterministic:
    period_s: float

    model = "deterministic"


@dataclass(frozen=True)
class Exponential:
    mean_s: float

    model = "exponential"


@dataclass(frozen=True)
class OnOff:
    on_s: float
    off_s: float
    burst_rate_bps: float

    model = "onoff"


IatModel = Deterministic | Exponential | OnOff


def iat_to_json(iat: IatModel) -> dict:
    if isinstance(iat, Deterministic):
        return {"model": "deterministic", "period_s": iat.period_s}
    if isinstance(iat, Exponential):
        return {"model": "exponential", "mean_s": iat.mean_s}
    if isinstance(iat, OnOff):
        return {
            "model": "onoff",
            "on_s": iat.on_s,
            "off_s": iat.off_s,
            "burst_rate_bps": iat.burst_rate_bps,
        }
    raise InvalidFlowSpec(f"unknown IAT model {iat!r}")


def iat_from_json(obj: dict) -> IatModel:
    model = obj.get("model")
    if model == "deterministic":
        return Deterministic(period_s=float(obj["period_s"]))
    if model == "exponential":
        return Exponential(mean_s=float(obj["mean_s"]))
    if model == "onoff":
        return OnOff(
            on_s=float(obj["on_s"]),
            off_s=float(obj["off_s"]),
            burst_rate_bps=float(obj["burst_rate_bps"]),
        )
    raise InvalidFlowSpec(f"unknown IAT model {model!r}")


@dataclass(frozen=True)
class FlowSpec:
    """Declarative description of one application traffic pattern."""

    flow_id: int
    kind: str
    direction: str
    payload_bytes: int
    seed: int
    target_rate_bps: float | None = None
    iat: IatModel | None = None
    frame_rate_hz: float | None = None
    frame_bytes: int | None = None
    frame_deadline_ms: float | None = None
    echo_interval_s: float | None = DEFAULT_ECHO_INTERVAL_S

    def validate(self) -> None:
        if not 0 <= self.flow_id < (1 << 16):
            raise InvalidFlowSpec(f"flow_id {self.flow_id} out of u16 range")
        if self.kind not in FlowKind.ALL:
            raise InvalidFlowSpec(f"unknown flow kind {self.kind!r}")
        if self.direction not in Direction.ALL:
            raise InvalidFlowSpec(f"unknown direction {self.direction!r}")
        if not HEADER_LEN <= self.payload_bytes <= MAX_DATAGRAM:
            raise InvalidFlowSpec(
                f"payload_bytes {self.payload_bytes} outside [{HEADER_LEN}, {MAX_DATAGRAM}]"
            )
        if self.echo_interval_s is not None and self.echo_interval_s <= 0:
            raise InvalidFlowSpec("echo_interval_s must be positive or null")

        if self.kind == FlowKind.CONSTANT_STREAM:
            if self.target_rate_bps is None or self.target_rate_bps <= 0:
                raise InvalidFlowSpec("constant_stream requires target_rate_bps > 0")
            if self.iat is not None:
                raise InvalidFlowSpec("constant_stream derives its IAT from the rate")
        elif self.kind == FlowKind.PERIODIC_SENSOR:
            if not isinstance(self.iat, (Deterministic, Exponential)):
                raise InvalidFlowSpec(
                    "periodic_sensor requires a deterministic or exponential IAT model"
                )
            if isinstance(self.iat, Deterministic) and self.iat.period_s <= 0:
                raise InvalidFlowSpec("IAT period_s must be > 0")
            if isinstance(self.iat, Exponential) and self.iat.mean_s <= 0:
                raise InvalidFlowSpec("IAT mean_s must be > 0")
        elif self.kind == FlowKind.BURSTY_TRANSFER:
            if not isinstance(self.iat, OnOff):
                raise InvalidFlowSpec("bursty_transfer requires an on/off IAT model")
            if self.iat.on_s <= 0 or self.iat.off_s < 0:
                raise InvalidFlowSpec("on_s must be > 0 and off_s >= 0")
            if self.iat.burst_rate_bps <= 0:
                raise InvalidFlowSpec("burst_rate_bps must be > 0")
        elif self.kind == FlowKind.FRAME_VIDEO:
            if self.frame_rate_hz is None or self.frame_rate_hz <= 0:
                raise InvalidFlowSpec("frame_video requires frame_rate_hz > 0")
            if self.frame_bytes is None or self.frame_bytes < 1:
                raise InvalidFlowSpec("frame_video requires frame_bytes >= 1")
            if self.frame_deadline_ms is None or self.frame_deadline_ms <= 0:
                raise InvalidFlowSpec("frame_video requires frame_deadline_ms > 0")

    @property
    def fragment_count(self) -> int:
        """Datagrams per video frame (1 for non-video flows)."""
        if self.kind != FlowKind.FRAME_VIDEO:
            return 1
        assert self.frame_bytes is not None
        return max(1, math.ceil(self.frame_bytes / self.payload_bytes))

    @property
    def offered_bps(self) -> float:
        """Long-run mean payload bits per second this flow attempts to send."""
        if self.kind == FlowKind.CONSTANT_STREAM:
            assert self.target_rate_bps is not None
            return float(self.target_rate_bps)
        if self.kind == FlowKind.PERIODIC_SENSOR:
            assert self.iat is not None
            if isinstance(self.iat, Deterministic):
                mean_iat = self.iat.period_s
            else:
                assert isinstance(self.iat, Exponential)
                mean_iat = self.iat.mean_s
            return self.payload_bytes * 8 / mean_iat
        if self.kind == FlowKind.BURSTY_TRANSFER:
            assert isinstance(self.iat, OnOff)
            duty = self.iat.on_s / (self.iat.on_s + self.iat.off_s)
            return self.iat.burst_rate_bps * duty
        if self.kind == FlowKind.FRAME_VIDEO:
            assert self.frame_rate_hz is not None and self.frame_bytes is not None
            return self.frame_rate_hz * self.frame_bytes * 8
        raise InvalidFlowSpec(f"unknown flow kind {self.kind!r}")

    def to_json(self) -> dict:
        obj: dict = {
            "flow_id": self.flow_id,
            "kind": self.kind,
            "direction": self.direction,
            "payload_bytes": self.payload_bytes,
            "seed": self.seed,
        }
        if self.target_rate_bps is not None:
            obj["target_rate_bps"] = self.target_rate_bps
        if self.iat is not None:
            obj["iat"] = iat_to_json(self.iat)
        if self.frame_rate_hz is not None:
            obj["frame_rate_hz"] = self.frame_rate_hz
        if self.frame_bytes is not None:
            obj["frame_bytes"] = self.frame_bytes
        if self.frame_deadline_ms is not None:
            obj["frame_deadline_ms"] = self.frame_deadline_ms
        obj["echo_interval_s"] = self.echo_interval_s
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "FlowSpec":
        spec = cls(
            flow_id=int(obj["flow_id"]),
            kind=str(obj["kind"]),
            direction=str(obj["direction"]),
            payload_bytes=int(obj["payload_bytes"]),
            seed=int(obj["seed"]),
            target_rate_bps=(
                float(obj["target_rate_bps"]) if obj.get("target_rate_bps") is not None else None
            ),
            iat=iat_from_json(obj["iat"]) if obj.get("iat") is not None else None,
            frame_rate_hz=(
                float(obj["frame_rate_hz"]) if obj.get("frame_rate_hz") is not None else None
            ),
            frame_bytes=int(obj["frame_bytes"]) if obj.get("frame_bytes") is not None else None,
            frame_deadline_ms=(
                float(obj["frame_deadline_ms"])
                if obj.get("frame_deadline_ms") is not None
                else None
            ),
            echo_interval_s=(
                float(obj["echo_interval_s"]) if obj.get("echo_interval_s") is not None else None
            ),
        )
        spec.validate()
        return spec


@dataclass(frozen=True)
class DeviceTrafficProfile:
    """Ordered set of flows one device emulates concurrently."""

    device_id: str
    flows: tuple[FlowSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "flows", tuple(self.flows))

    def validate(self) -> None:
        if not self.device_id:
            raise InvalidFlowSpec("device_id must be non-empty")
        seen: set[int] = set()
        for spec in self.flows:
            spec.validate()
            if spec.flow_id in seen:
                raise InvalidFlowSpec(f"duplicate flow_id {spec.flow_id} in profile")
            seen.add(spec.flow_id)

    def to_json(self) -> dict:
        return {"device_id": self.device_id, "flows": [f.to_json() for f in self.flows]}

    @classmethod
    def from_json(cls, obj: dict) -> "DeviceTrafficProfile":
        profile = cls(
            device_id=str(obj["device_id"]),
            flows=tuple(FlowSpec.from_json(f) for f in obj.get("flows", [])),
        )
        profile.validate()
        return profile


def offered_load(profile: DeviceTrafficProfile) -> float:
    """Long-run mean offered payload bits per second summed over flows."""
    return sum(spec.offered_bps for spec in profile.flows)


def derive_seed(base_seed: int, device_id: str, flow_id: int) -> int:
    """Stable per-flow seed for a global override (STING_SEED)."""
    digest = hashlib.blake2b(
        f"{base_seed}:{device_id}:{flow_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class Departure:
    """One scheduled packet emission."""

    time_ns: int
    flow_id: int
    seq: int
    size_bytes: int
    echo: bool = False
    frame_id: int = 0
    fragment_index: int = 0
    fragment_count: int = 1

    @property
    def time_s(self) -> float:
        return self.time_ns / NS_PER_S


class _FlowState:
    """Departure process of a single flow; advances one packet at a time."""

    def __init__(self, spec: FlowSpec, origin_ns: int, seed: int):
        self.spec = spec
        self.origin_ns = origin_ns
        self.rng = random.Random(seed)
        self.seq = 0
        self.next_ns = origin_ns
        if spec.echo_interval_s is not None:
            self.echo_interval_ns = round(spec.echo_interval_s * NS_PER_S)
            self.next_echo_ns = origin_ns
        else:
            self.echo_interval_ns = None
            self.next_echo_ns = None

        if spec.kind == FlowKind.CONSTANT_STREAM:
            assert spec.target_rate_bps is not None
            self.iat_ns = max(1, round(spec.payload_bytes * 8 * NS_PER_S / spec.target_rate_bps))
        elif spec.kind == FlowKind.PERIODIC_SENSOR:
            if isinstance(spec.iat, Deterministic):
                self.iat_ns = max(1, round(spec.iat.period_s * NS_PER_S))
            else:
                self.iat_ns = None  # sampled per packet
        elif spec.kind == FlowKind.BURSTY_TRANSFER:
            assert isinstance(spec.iat, OnOff)
            self.on_ns = round(spec.iat.on_s * NS_PER_S)
            self.off_ns = round(spec.iat.off_s * NS_PER_S)
            self.burst_iat_ns = max(
                1, round(spec.payload_bytes * 8 * NS_PER_S / spec.iat.burst_rate_bps)
            )
            self.cycle_start_ns = origin_ns
        elif spec.kind == FlowKind.FRAME_VIDEO:
            assert spec.frame_rate_hz is not None and spec.frame_bytes is not None
            self.frame_index = 0
            self.pending: list[Departure] = []

    def _mark_echo(self, time_ns: int) -> bool:
        if self.next_echo_ns is None or time_ns < self.next_echo_ns:
            return False
        self.next_echo_ns = time_ns + self.echo_interval_ns
        return True

    def peek_time(self) -> int:
        if self.spec.kind == FlowKind.FRAME_VIDEO and self.pending:
            return self.pending[0].time_ns
        return self.next_ns

    def pop(self) -> Departure:
        spec = self.spec
        if spec.kind == FlowKind.FRAME_VIDEO:
            if not self.pending:
                self._build_frame()
            dep = self.pending.pop(0)
            if not self.pending:
                self._schedule_next_frame()
            return dep

        time_ns = self.next_ns
        dep = Departure(
            time_ns=time_ns,
            flow_id=spec.flow_id,
            seq=self.seq,
            size_bytes=spec.payload_bytes,
            echo=self._mark_echo(time_ns),
        )
        self.seq += 1

        if spec.kind == FlowKind.CONSTANT_STREAM:
            self.next_ns = time_ns + self.iat_ns
        elif spec.kind == FlowKind.PERIODIC_SENSOR:
            if self.iat_ns is not None:
                self.next_ns = time_ns + self.iat_ns
            else:
                assert isinstance(spec.iat, Exponential)
                sample = self.rng.expovariate(1.0 / spec.iat.mean_s)
                self.next_ns = time_ns + max(1, round(sample * NS_PER_S))
        elif spec.kind == FlowKind.BURSTY_TRANSFER:
            nxt = time_ns + self.burst_iat_ns
            if nxt >= self.cycle_start_ns + self.on_ns:
                self.cycle_start_ns += self.on_ns + self.off_ns
                nxt = self.cycle_start_ns
            self.next_ns = nxt
        return dep

    def _build_frame(self) -> None:
        spec = self.spec
        count = spec.fragment_count
        time_ns = self.next_ns
        echo = self._mark_echo(time_ns)
        remainder = spec.frame_bytes - (count - 1) * spec.payload_bytes
        last_size = max(HEADER_LEN, remainder)
        for idx in range(count):
            size = spec.payload_bytes if idx < count - 1 else last_size
            self.pending.append(
                Departure(
                    time_ns=time_ns,
                    flow_id=spec.flow_id,
                    seq=self.seq,
                    size_bytes=size,
                    echo=echo and idx == 0,
                    frame_id=self.frame_index,
                    fragment_index=idx,
                    fragment_count=count,
                )
            )
            self.seq += 1

    def _schedule_next_frame(self) -> None:
        spec = self.spec
        self.frame_index += 1
        # recomputed from the frame index so rounding never drifts
        self.next_ns = self.origin_ns + round(self.frame_index * NS_PER_S / spec.frame_rate_hz)


class Schedule:
    """Merged, infinite departure schedule for one device profile.

    Departure times are globally non-decreasing; ties across flows are broken
    by ascending flow_id.  Identical profile and seeds reproduce the identical
    departure sequence.
    """

    def __init__(
        self,
        profile: DeviceTrafficProfile,
        origin_ns: int = 0,
        seed_override: int | None = None,
    ):
        profile.validate()
        self.profile = profile
        self._flows: dict[int, _FlowState] = {}
        self._heap: list[tuple[int, int]] = []
        for spec in profile.flows:
            seed = spec.seed
            if seed_override is not None:
                seed = derive_seed(seed_override, profile.device_id, spec.flow_id)
            state = _FlowState(spec, origin_ns, seed)
            self._flows[spec.flow_id] = state
            heapq.heappush(self._heap, (state.peek_time(), spec.flow_id))

    def __bool__(self) -> bool:
        return bool(self._heap)

    def peek_time_ns(self) -> int | None:
        """Earliest pending departure time, or None for an empty profile."""
        return self._heap[0][0] if self._heap else None

    def next_departure(self) -> Departure:
        """Pop the earliest pending departure and advance that flow."""
        if not self._heap:
            raise IndexError("schedule has no flows")
        _, flow_id = heapq.heappop(self._heap)
        state = self._flows[flow_id]
        dep = state.pop()
        heapq.heappush(self._heap, (state.peek_time(), flow_id))
        return dep

    def take_until(self, limit_ns: int) -> list[Departure]:
        """All departures strictly before ``limit_ns``, in order."""
        out = []
        while self._heap and self._heap[0][0] < limit_ns:
            out.append(self.next_departure())
        return out
