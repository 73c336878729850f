"""Traffic-generating end device.

An agent subscribes to its control topics, stages validated flow
configurations, and on an armed start/stop window runs its flows against the
data-plane transport: scheduled sends, immediate echo responses, and local
metric accumulation.  Results are published exactly once per run, only after
the stop instant; nothing leaves the device mid-run so result traffic cannot
distort the measurement.

The data-plane engine (:class:`FlowEndpoint`) is shared with the
controller's sink endpoint, which plays the mirror role: receiver for uplink
flows, sender for downlink flows, echo responder for everything.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
from dataclasses import dataclass, field

from . import probes
from .bus import TOPIC_COMMAND, TOPIC_CONFIG, TOPIC_RESULTS, TOPIC_STATUS
from .metrics import FlowMetrics
from .traffic import Departure, DeviceTrafficProfile, Direction, FlowKind, FlowSpec, Schedule
from .vtime import Clock

log = logging.getLogger(__name__)

LIFECYCLE_IDLE = "idle"
LIFECYCLE_CONFIGURED = "configured"
LIFECYCLE_RUNNING = "running"
LIFECYCLE_REPORTING = "reporting"


def config_hash(payload: dict) -> str:
    """Stable digest over profile, peer and window; echoed in acks."""
    basis = {
        "profile": payload.get("profile"),
        "data_peer": payload.get("data_peer"),
        "window_s": payload.get("window_s"),
    }
    blob = json.dumps(basis, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class _SendGroup:
    owner: str
    dst: str
    flows: list[FlowSpec]
    schedule: Schedule
    tx_packets: dict[int, int] = field(default_factory=dict)
    tx_bytes: dict[int, int] = field(default_factory=dict)


class FlowEndpoint:
    """Data-plane engine for one device on one transport.

    Configured per run with the flows it sends (grouped by destination and
    owning device) and the flows it expects to receive (keyed by source
    address).  Senders emit only inside ``[start_ns, stop_ns)``; arrivals
    outside the window are ignored.
    """

    def __init__(self, device_id, transport, clock=None, on_tx=None):
        self.device_id = device_id
        self.transport = transport
        self.clock = clock or Clock.running()
        self.on_tx = on_tx
        self._groups: list[_SendGroup] = []
        self._recv: dict[tuple[str, int], tuple[str, FlowSpec, FlowMetrics]] = {}
        self._send_metrics: dict[tuple[str, int], FlowMetrics] = {}
        self._start_ns = 0
        self._stop_ns = 0
        self._armed = False
        self._running = False
        self.failure: str | None = None
        self.stray_packets = 0
        self.malformed_packets = 0
        transport.set_receiver(self._on_datagram)

    def configure(
        self,
        send_flows: list[tuple[str, FlowSpec, str]],
        recv_flows: list[tuple[str, FlowSpec, str]],
        window_s: float = 1.0,
        seed_override: int | None = None,
    ) -> None:
        """Stage flow sets for the next run.

        ``send_flows`` and ``recv_flows`` are (owner_device_id, spec, peer
        address) triples; senders are grouped per (owner, destination) so
        each group runs one merged schedule.
        """
        self._window_s = window_s
        self._seed_override = seed_override
        self._send_defs: dict[tuple[str, str], list[FlowSpec]] = {}
        for owner, spec, dst in send_flows:
            self._send_defs.setdefault((owner, dst), []).append(spec)
        self._recv_defs = list(recv_flows)

    def arm(self, start_ns: int, stop_ns: int) -> None:
        """Instantiate schedules and fresh accumulators for [start, stop)."""
        self._start_ns = start_ns
        self._stop_ns = stop_ns
        self._armed = True
        self.failure = None
        self._groups = []
        self._send_metrics = {}
        self._recv = {}
        for (owner, dst), flows in self._send_defs.items():
            profile = DeviceTrafficProfile(device_id=owner, flows=tuple(flows))
            self._groups.append(
                _SendGroup(
                    owner=owner,
                    dst=dst,
                    flows=flows,
                    schedule=Schedule(profile, origin_ns=start_ns, seed_override=self._seed_override),
                    tx_packets={f.flow_id: 0 for f in flows},
                    tx_bytes={f.flow_id: 0 for f in flows},
                )
            )
            for spec in flows:
                self._send_metrics[(dst, spec.flow_id)] = FlowMetrics(
                    spec.flow_id, window_s=self._window_s, origin_ns=start_ns
                )
        for owner, spec, src in self._recv_defs:
            deadline = spec.frame_deadline_ms if spec.kind == FlowKind.FRAME_VIDEO else None
            self._recv[(src, spec.flow_id)] = (
                owner,
                spec,
                FlowMetrics(
                    spec.flow_id,
                    window_s=self._window_s,
                    origin_ns=start_ns,
                    frame_deadline_ms=deadline,
                ),
            )

    async def run(self) -> None:
        """Drive senders between start and stop; returns at stop."""
        if not self._armed:
            raise RuntimeError("endpoint not armed")
        await self.clock.sleep_until_ns(self._start_ns)
        if self._stop_ns <= self._start_ns:
            self._armed = False
            return
        self._running = True
        senders = [asyncio.ensure_future(self._send_group(g)) for g in self._groups]
        try:
            if senders:
                await asyncio.gather(*senders)
            await self.clock.sleep_until_ns(self._stop_ns)
        finally:
            for task in senders:
                task.cancel()
            self._running = False
            self._armed = False

    def abort(self) -> None:
        self._stop_ns = self.clock.now_ns()
        self._running = False

    async def _send_group(self, group: _SendGroup) -> None:
        sched = group.schedule
        clock = self.clock
        while self.failure is None:
            t = sched.peek_time_ns()
            if t is None or t >= self._stop_ns:
                break
            await clock.sleep_until_ns(t)
            if not self._running:
                break
            limit = min(clock.now_ns(), self._stop_ns - 1)
            for dep in sched.take_until(limit + 1):
                self._emit(group, dep)
                if self.failure is not None:
                    break

    def _emit(self, group: _SendGroup, dep: Departure) -> None:
        now = self.clock.now_ns()
        packet = probes.ProbePacket(
            packet_type=probes.TYPE_ECHO_REQUEST if dep.echo else probes.TYPE_DATA,
            flow_id=dep.flow_id,
            seq=dep.seq,
            tx_timestamp_ns=now,
            frame_id=dep.frame_id,
            fragment_index=dep.fragment_index,
            fragment_count=dep.fragment_count,
        )
        data = probes.encode(packet, dep.size_bytes)
        try:
            self.transport.send(group.dst, data)
        except Exception as exc:  # noqa: BLE001 - any transport fault aborts the run
            self.failure = f"transport failure: {exc}"
            log.error("%s: %s", self.device_id, self.failure)
            return
        group.tx_packets[dep.flow_id] += 1
        group.tx_bytes[dep.flow_id] += dep.size_bytes
        if self.on_tx is not None:
            self.on_tx(group.owner, dep.flow_id, dep.seq, now)

    def _on_datagram(self, src: str, data: bytes, rx_ns: int) -> None:
        if not (self._running and self._start_ns <= rx_ns < self._stop_ns):
            self.stray_packets += 1
            return
        try:
            packet = probes.decode(data)
        except probes.ProbeError:
            self.malformed_packets += 1
            return
        if packet.packet_type == probes.TYPE_ECHO_REPLY:
            entry = self._send_metrics.get((src, packet.flow_id))
            if entry is not None:
                entry.ingest(packet, rx_ns, len(data))
            return
        entry = self._recv.get((src, packet.flow_id))
        if entry is not None:
            entry[2].ingest(packet, rx_ns, len(data))
        else:
            self.stray_packets += 1
        if packet.packet_type == probes.TYPE_ECHO_REQUEST:
            reply = probes.make_echo_reply(packet, rx_ns=rx_ns, tx_ns=self.clock.now_ns())
            try:
                self.transport.send(src, probes.encode(reply, probes.HEADER_LEN))
            except Exception as exc:  # noqa: BLE001
                self.failure = f"transport failure: {exc}"

    def collect_reports(self) -> list[dict]:
        """Partial per-flow reports for both roles played by this endpoint."""
        reports = []
        for group in self._groups:
            for spec in group.flows:
                m = self._send_metrics[(group.dst, spec.flow_id)]
                flow = spec.to_json()
                flow["offered_bps"] = spec.offered_bps
                reports.append(
                    {
                        "role": "sender",
                        "device_id": group.owner,
                        "flow_id": spec.flow_id,
                        "flow": flow,
                        "tx_packets": group.tx_packets[spec.flow_id],
                        "tx_bytes": group.tx_bytes[spec.flow_id],
                        "metrics": m.finalize(end_ns=self._stop_ns),
                    }
                )
        for (src, flow_id), (owner, spec, m) in self._recv.items():
            flow = spec.to_json()
            flow["offered_bps"] = spec.offered_bps
            reports.append(
                {
                    "role": "receiver",
                    "device_id": owner,
                    "flow_id": flow_id,
                    "flow": flow,
                    "src": src,
                    "metrics": m.finalize(end_ns=self._stop_ns),
                }
            )
        return reports

    def live_window(self, index: int) -> list[dict]:
        """Read-only view of one closed receive window, for live streaming."""
        out = []
        for (src, flow_id), (owner, spec, m) in self._recv.items():
            if m.origin_ns is None:
                continue
            win = m._windows.get(index)
            out.append(
                {
                    "device_id": owner,
                    "flow_id": flow_id,
                    "start_ns": m.origin_ns + index * m.window_ns,
                    "rx_bytes": win.rx_bytes if win else 0,
                    "throughput_bps": (win.rx_bytes * 8 / m.window_s) if win else 0.0,
                }
            )
        return out


class Agent:
    """Control-plane lifecycle around a :class:`FlowEndpoint`.

    Lifecycle transitions are strict: idle -> configured -> running ->
    reporting -> idle.  Config is rejected while running; commands are
    idempotent by message id.
    """

    def __init__(
        self,
        device_id: str,
        bus,
        transport,
        clock: Clock | None = None,
        heartbeat_s: float = 1.0,
        spool_path=None,
        seed_override: int | None = None,
        on_tx=None,
    ):
        self.device_id = device_id
        self.bus = bus
        self.clock = clock or Clock.running()
        self.endpoint = FlowEndpoint(device_id, transport, self.clock, on_tx=on_tx)
        self.heartbeat_s = heartbeat_s
        self.spool_path = spool_path
        self.seed_override = seed_override
        self.lifecycle = LIFECYCLE_IDLE
        self._staged: dict | None = None
        self._staged_hash: str | None = None
        self._run_task: asyncio.Task | None = None
        self._heartbeat_task: asyncio.Task | None = None
        self._seen_msg_ids: set[str] = set()
        self._published_runs: set[tuple[str, int, int]] = set()
        self._subs = []

    # -- control plane ---------------------------------------------------

    async def start(self) -> None:
        self._subs.append(
            self.bus.subscribe(
                TOPIC_CONFIG.format(device_id=self.device_id), self._on_config, owner=self.device_id
            )
        )
        self._subs.append(
            self.bus.subscribe(
                TOPIC_COMMAND.format(device_id=self.device_id),
                self._on_command,
                owner=self.device_id,
            )
        )
        self._heartbeat_task = asyncio.ensure_future(self._heartbeat_loop())
        self._publish_status(self.heartbeat())

    async def shutdown(self) -> None:
        for task in (self._heartbeat_task, self._run_task):
            if task is not None:
                task.cancel()
        for sub in self._subs:
            self.bus.unsubscribe(sub)
        self._subs.clear()

    def heartbeat(self) -> dict:
        """Liveness status: device, lifecycle, clock and active flow count."""
        active = 0
        if self._staged is not None and self.lifecycle in (
            LIFECYCLE_CONFIGURED,
            LIFECYCLE_RUNNING,
        ):
            active = len(self._staged["profile"].flows)
        return {
            "type": "heartbeat",
            "device_id": self.device_id,
            "lifecycle": self.lifecycle,
            "clock_ns": self.clock.now_ns(),
            "active_flows": active,
            "data_addr": self.endpoint.transport.local_addr,
            "heartbeat_s": self.heartbeat_s,
        }

    async def _heartbeat_loop(self) -> None:
        while True:
            await asyncio.sleep(self.heartbeat_s)
            self._publish_status(self.heartbeat())

    def _publish_status(self, payload: dict) -> None:
        self.bus.publish(
            TOPIC_STATUS.format(device_id=self.device_id), payload, owner=self.device_id
        )

    def _on_config(self, message: dict) -> None:
        payload = message["payload"]
        ack = self.apply_config(payload)
        ack["msg_id_ref"] = message["msg_id"]
        self._publish_status(ack)

    def apply_config(self, payload: dict) -> dict:
        """Validate and stage a profile; returns the ack/nack status event."""
        base = {
            "type": "config_ack",
            "device_id": self.device_id,
            "run_id": payload.get("run_id"),
            "step_index": payload.get("step_index"),
            "instance_index": payload.get("instance_index"),
        }
        if self.lifecycle not in (LIFECYCLE_IDLE, LIFECYCLE_CONFIGURED):
            return {**base, "ok": False, "reason": "busy_running"}
        try:
            profile = DeviceTrafficProfile.from_json(payload["profile"])
        except (KeyError, TypeError, ValueError) as exc:
            return {**base, "ok": False, "reason": f"invalid_profile: {exc}"}
        if profile.device_id != self.device_id:
            return {**base, "ok": False, "reason": "invalid_profile: device_id mismatch"}
        digest = config_hash(payload)
        self._staged = {
            "profile": profile,
            "data_peer": payload.get("data_peer"),
            "window_s": float(payload.get("window_s", 1.0)),
            "run_id": payload.get("run_id"),
            "step_index": int(payload.get("step_index", 0)),
            "instance_index": int(payload.get("instance_index", 0)),
        }
        self._staged_hash = digest
        self.lifecycle = LIFECYCLE_CONFIGURED
        return {
            **base,
            "ok": True,
            "config_hash": digest,
            "data_addr": self.endpoint.transport.local_addr,
        }

    def _on_command(self, message: dict) -> None:
        if message["msg_id"] in self._seen_msg_ids:
            return
        self._seen_msg_ids.add(message["msg_id"])
        payload = message["payload"]
        command = payload.get("command")
        if command == "arm":
            if self.lifecycle != LIFECYCLE_CONFIGURED or self._staged is None:
                self._publish_status(
                    {
                        "type": "command_nack",
                        "device_id": self.device_id,
                        "command": "arm",
                        "reason": f"not_configured (lifecycle={self.lifecycle})",
                    }
                )
                return
            self._run_task = asyncio.ensure_future(
                self._run_step(int(payload["start_ns"]), int(payload["stop_ns"]))
            )
        elif command == "abort":
            if self._run_task is not None:
                self._run_task.cancel()
            self.endpoint.abort()
            self.lifecycle = LIFECYCLE_IDLE
            self._staged = None
            self._publish_status(
                {"type": "aborted", "device_id": self.device_id, "run_id": payload.get("run_id")}
            )
        else:
            log.warning("%s: unknown command %r", self.device_id, command)

    # -- data plane -------------------------------------------------------

    async def _run_step(self, start_ns: int, stop_ns: int) -> None:
        staged = self._staged
        assert staged is not None
        profile: DeviceTrafficProfile = staged["profile"]
        peer = staged["data_peer"]
        send_flows = [
            (self.device_id, spec, peer)
            for spec in profile.flows
            if spec.direction == Direction.UPLINK
        ]
        recv_flows = [
            (self.device_id, spec, peer)
            for spec in profile.flows
            if spec.direction == Direction.DOWNLINK
        ]
        self.endpoint.configure(
            send_flows,
            recv_flows,
            window_s=staged["window_s"],
            seed_override=self.seed_override,
        )
        self.endpoint.arm(start_ns, stop_ns)
        await self.clock.sleep_until_ns(start_ns)
        if stop_ns > start_ns:
            self.lifecycle = LIFECYCLE_RUNNING
        await self.endpoint.run()
        self.lifecycle = LIFECYCLE_REPORTING
        reports = self.endpoint.collect_reports()
        self._publish_results(staged, reports)
        self.lifecycle = LIFECYCLE_IDLE
        self._staged = None

    def _publish_results(self, staged: dict, reports: list[dict]) -> None:
        key = (staged["run_id"], staged["step_index"], staged["instance_index"])
        if key in self._published_runs:
            return
        self._published_runs.add(key)
        payload = {
            "type": "results",
            "run_id": staged["run_id"],
            "step_index": staged["step_index"],
            "instance_index": staged["instance_index"],
            "device_id": self.device_id,
            "partial": self.endpoint.failure is not None,
            "failure": self.endpoint.failure,
            "reports": reports,
        }
        if self.spool_path is not None:
            try:
                with open(self.spool_path, "a", encoding="utf-8") as spool:
                    spool.write(json.dumps(payload, sort_keys=True) + "\n")
            except OSError as exc:
                log.error("%s: cannot spool results: %s", self.device_id, exc)
        self.bus.publish(
            TOPIC_RESULTS.format(device_id=self.device_id), payload, owner=self.device_id
        )
