"""Management and control server.

Owns the device registry (fed by agent heartbeats), executes scenarios as a
single state machine per run (configure -> ack -> arm -> collect, step by
step), merges both endpoint views of every flow into canonical reports, and
persists immutable run records.  At most one run is active at a time.

The controller's own data-plane endpoint (the *sink*) is the peer of every
agent flow: it receives uplink traffic, sends downlink traffic and answers
echo probes, so uplink delivery is measured at the true receiver without any
mid-run result uploads from agents.
"""

from __future__ import annotations

import asyncio
import datetime
import logging
import time
import uuid

from .agent import FlowEndpoint, config_hash
from .bus import TOPIC_COMMAND, TOPIC_CONFIG, TOPIC_RUN_EVENTS
from .metrics import merge_reports
from .scenarios import Scenario, ScenarioError, StepInstance
from .storage import RunStore
from .traffic import Direction
from .vtime import Clock

log = logging.getLogger(__name__)

SINK_DEVICE_ID = "_controller"

HEARTBEAT_TIMEOUT_FACTOR = 3.0


class ControllerBusy(RuntimeError):
    """A run is already active."""


class RunAborted(RuntimeError):
    pass


class AgentRegistry:
    """Last-seen bookkeeping for agents, fed by heartbeat status messages."""

    def __init__(self, clock: Clock):
        self._clock = clock
        self._agents: dict[str, dict] = {}

    def on_heartbeat(self, payload: dict) -> None:
        device_id = payload.get("device_id")
        if not device_id:
            return
        entry = self._agents.setdefault(device_id, {})
        entry.update(
            {
                "device_id": device_id,
                "lifecycle": payload.get("lifecycle"),
                "clock_ns": payload.get("clock_ns"),
                "active_flows": payload.get("active_flows", 0),
                "data_addr": payload.get("data_addr"),
                "heartbeat_s": float(payload.get("heartbeat_s", 1.0)),
                "last_seen_ns": self._clock.now_ns(),
            }
        )

    def is_reachable(self, device_id: str) -> bool:
        entry = self._agents.get(device_id)
        if entry is None:
            return False
        silence_ns = self._clock.now_ns() - entry["last_seen_ns"]
        return silence_ns <= HEARTBEAT_TIMEOUT_FACTOR * entry["heartbeat_s"] * 1_000_000_000

    def known(self, device_id: str) -> bool:
        return device_id in self._agents

    def snapshot(self) -> list[dict]:
        now = self._clock.now_ns()
        out = []
        for entry in self._agents.values():
            silence_ns = now - entry["last_seen_ns"]
            out.append(
                {
                    **entry,
                    "silence_ns": silence_ns,
                    "reachable": silence_ns
                    <= HEARTBEAT_TIMEOUT_FACTOR * entry["heartbeat_s"] * 1_000_000_000,
                }
            )
        out.sort(key=lambda e: e["device_id"])
        return out


class Controller:
    """Scenario lifecycle engine over a bus, a store and a sink transport."""

    def __init__(
        self,
        bus,
        store: RunStore,
        sink_factory,
        clock: Clock | None = None,
        ack_timeout_s: float = 5.0,
        results_grace_s: float = 5.0,
        arm_lead_s: float = 0.0,
    ):
        self.bus = bus
        self.store = store
        self.sink_factory = sink_factory
        self.clock = clock or Clock.running()
        self.ack_timeout_s = ack_timeout_s
        self.results_grace_s = results_grace_s
        self.arm_lead_s = arm_lead_s
        self.registry = AgentRegistry(self.clock)
        self._ack_waiters: dict[str, asyncio.Future] = {}
        self._result_waiters: dict[tuple, asyncio.Future] = {}
        self._active_run_id: str | None = None
        self._abort_event: asyncio.Event | None = None
        self._run_seq = 0
        self._subs = [
            bus.subscribe("sting/agents/+/status", self._on_status),
            bus.subscribe("sting/agents/+/results", self._on_results),
        ]

    def shutdown(self) -> None:
        for sub in self._subs:
            self.bus.unsubscribe(sub)
        self._subs.clear()

    @property
    def active_run_id(self) -> str | None:
        return self._active_run_id

    # -- control-plane handlers ------------------------------------------

    def _on_status(self, message: dict) -> None:
        payload = message["payload"]
        kind = payload.get("type")
        if kind == "heartbeat":
            self.registry.on_heartbeat(payload)
        elif kind == "config_ack":
            future = self._ack_waiters.pop(payload.get("msg_id_ref", ""), None)
            if future is not None and not future.done():
                future.set_result(payload)

    def _on_results(self, message: dict) -> None:
        payload = message["payload"]
        key = (
            payload.get("run_id"),
            payload.get("step_index"),
            payload.get("instance_index"),
            payload.get("device_id"),
        )
        future = self._result_waiters.pop(key, None)
        if future is not None and not future.done():
            future.set_result(payload)

    # -- run execution -----------------------------------------------------

    def abort_active(self) -> str | None:
        """Request the active run to abort; returns its id."""
        if self._abort_event is not None:
            self._abort_event.set()
        return self._active_run_id

    async def _interruptible(self, coro):
        abort_event = self._abort_event
        assert abort_event is not None
        task = asyncio.ensure_future(coro)
        abort_task = asyncio.ensure_future(abort_event.wait())
        try:
            await asyncio.wait({task, abort_task}, return_when=asyncio.FIRST_COMPLETED)
        finally:
            abort_task.cancel()
        if abort_event.is_set():
            task.cancel()
            try:
                await task
            except (asyncio.CancelledError, Exception):  # noqa: BLE001
                pass
            raise RunAborted()
        return await task

    def _event(self, record: dict | None, run_id: str, etype: str, **fields) -> None:
        event = {"t_ns": self.clock.now_ns(), "type": etype, **fields}
        if record is not None:
            record["events"].append(event)
        self.bus.publish(TOPIC_RUN_EVENTS.format(run_id=run_id), event)

    async def execute_scenario(self, scenario: Scenario, operator: str | None = None) -> dict:
        """Run every step instance in order and persist the record.

        Preconditions: no other run active, every referenced device currently
        registered and reachable.  A config nack or ack timeout marks the
        step failed and the run partial; a missing result marks the device
        lost for that step.
        """
        scenario.validate()
        if self._active_run_id is not None:
            raise ControllerBusy(f"run {self._active_run_id} is active")
        for device_id in sorted(scenario.referenced_devices()):
            if not self.registry.known(device_id):
                raise ScenarioError(f"device {device_id!r} is not registered")
            if not self.registry.is_reachable(device_id):
                raise ScenarioError(f"device {device_id!r} is unreachable")

        self._run_seq += 1
        run_id = f"run-{uuid.uuid4().hex[:10]}"
        record = {
            "run_id": run_id,
            "seq": self._run_seq,
            "created_ns": self.clock.now_ns(),
            "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "status": "complete",
            "operator": operator,
            "scenario": scenario.to_json(),
            "offered_load_bps": {
                inst.ordinal: sum(
                    sum(s.offered_bps for s in p.flows) for p in inst.profiles
                )
                for inst in scenario.instances()
            },
            "steps": [],
            "events": [],
            "annotations": {},
        }
        self._active_run_id = run_id
        self._abort_event = asyncio.Event()
        sink_transport = await self.sink_factory(scenario.transport)
        sink = FlowEndpoint(SINK_DEVICE_ID, sink_transport, self.clock)
        self._event(record, run_id, "run_started", scenario_id=scenario.scenario_id)
        try:
            for inst in scenario.instances():
                step_ok = await self._execute_instance(record, scenario, inst, sink)
                if not step_ok:
                    record["status"] = "partial"
        except RunAborted:
            record["status"] = "aborted"
            for device_id in sorted(scenario.referenced_devices()):
                self.bus.publish(
                    TOPIC_COMMAND.format(device_id=device_id),
                    {"command": "abort", "run_id": run_id},
                )
            self._event(record, run_id, "run_aborted")
        finally:
            self._active_run_id = None
            self._abort_event = None
            sink_transport.close()
        self._event(record, run_id, "run_finished", status=record["status"])
        self.store.persist(record)
        return record

    async def _execute_instance(
        self, record: dict, scenario: Scenario, inst: StepInstance, sink: FlowEndpoint
    ) -> bool:
        run_id = record["run_id"]
        step_record = {
            "ordinal": inst.ordinal,
            "step_index": inst.step_index,
            "instance_index": inst.instance_index,
            "name": inst.name,
            "tracked": inst.tracked,
            "active_devices": inst.active_devices,
            "start_ns": None,
            "stop_ns": None,
            "duration_ns": inst.duration_ns,
            "acks": {},
            "failed": False,
            "failure": None,
            "lost_devices": [],
            "partial_devices": [],
            "reports": {},
        }
        record["steps"].append(step_record)

        # 1. push configs and await all acks
        ack_futures: dict[str, asyncio.Future] = {}
        loop = asyncio.get_event_loop()
        for profile in inst.profiles:
            payload = {
                "profile": profile.to_json(),
                "data_peer": sink.transport.local_addr,
                "window_s": scenario.window_s,
                "run_id": run_id,
                "step_index": inst.step_index,
                "instance_index": inst.instance_index,
            }
            expected_hash = config_hash(payload)
            msg_id = self.bus.publish(
                TOPIC_CONFIG.format(device_id=profile.device_id), payload
            )
            future = loop.create_future()
            future.expected_hash = expected_hash  # type: ignore[attr-defined]
            self._ack_waiters[msg_id] = future
            ack_futures[profile.device_id] = future
        try:
            acks = await self._interruptible(
                asyncio.wait_for(
                    asyncio.gather(*ack_futures.values()), timeout=self.ack_timeout_s
                )
            )
        except asyncio.TimeoutError:
            missing = [d for d, f in ack_futures.items() if not f.done()]
            step_record["failed"] = True
            step_record["failure"] = f"ack_timeout: {missing}"
            self._event(record, run_id, "step_failed", ordinal=inst.ordinal, reason="ack_timeout",
                        devices=missing)
            return False
        acks_by_device = {a["device_id"]: a for a in acks}
        for device_id, ack in acks_by_device.items():
            if not ack.get("ok"):
                step_record["failed"] = True
                step_record["failure"] = f"config_nack from {device_id}: {ack.get('reason')}"
                self._event(
                    record, run_id, "step_failed", ordinal=inst.ordinal,
                    reason="config_nack", device=device_id, detail=ack.get("reason"),
                )
                return False
            step_record["acks"][device_id] = ack["config_hash"]
            self._event(
                record, run_id, "config_ack", ordinal=inst.ordinal,
                device=device_id, config_hash=ack["config_hash"],
            )

        # 2. configure the sink as the peer of every flow
        sink_recv = []
        sink_send = []
        for profile in inst.profiles:
            agent_addr = acks_by_device[profile.device_id].get("data_addr")
            for spec in profile.flows:
                if spec.direction == Direction.UPLINK:
                    sink_recv.append((profile.device_id, spec, agent_addr))
                else:
                    sink_send.append((profile.device_id, spec, agent_addr))
        sink.configure(sink_send, sink_recv, window_s=scenario.window_s)

        # 3. arm everyone at a common start instant
        start_ns = self.clock.now_ns() + round(self.arm_lead_s * 1_000_000_000)
        stop_ns = start_ns + inst.duration_ns
        step_record["start_ns"] = start_ns
        step_record["stop_ns"] = stop_ns
        result_futures: dict[str, asyncio.Future] = {}
        for profile in inst.profiles:
            key = (run_id, inst.step_index, inst.instance_index, profile.device_id)
            future = loop.create_future()
            self._result_waiters[key] = future
            result_futures[profile.device_id] = future
        for profile in inst.profiles:
            self.bus.publish(
                TOPIC_COMMAND.format(device_id=profile.device_id),
                {
                    "command": "arm",
                    "run_id": run_id,
                    "step_index": inst.step_index,
                    "instance_index": inst.instance_index,
                    "start_ns": start_ns,
                    "stop_ns": stop_ns,
                },
            )
        sink.arm(start_ns, stop_ns)
        sink_task = asyncio.ensure_future(sink.run())
        pump_task = asyncio.ensure_future(
            self._window_pump(run_id, sink, start_ns, stop_ns, scenario.window_s)
        )
        self._event(
            record, run_id, "step_started", ordinal=inst.ordinal, name=inst.name,
            active_devices=inst.active_devices, start_ns=start_ns, stop_ns=stop_ns,
        )

        # 4. wait out the step, then collect every agent's results
        try:
            await self._interruptible(self.clock.sleep_until_ns(stop_ns))
            try:
                await self._interruptible(
                    asyncio.wait_for(
                        asyncio.gather(*result_futures.values()),
                        timeout=self.results_grace_s,
                    )
                )
            except asyncio.TimeoutError:
                pass
        finally:
            pump_task.cancel()
            if self._abort_event is not None and self._abort_event.is_set():
                sink.abort()
            await asyncio.gather(sink_task, return_exceptions=True)

        agent_results: dict[str, dict] = {}
        for device_id, future in result_futures.items():
            if future.done():
                agent_results[device_id] = future.result()
            else:
                key = (run_id, inst.step_index, inst.instance_index, device_id)
                self._result_waiters.pop(key, None)
                step_record["lost_devices"].append(device_id)
                self._event(record, run_id, "agent_lost", ordinal=inst.ordinal, device=device_id)
        for device_id, payload in agent_results.items():
            if payload.get("partial"):
                step_record["partial_devices"].append(device_id)
            self._event(record, run_id, "results_received", ordinal=inst.ordinal, device=device_id)

        # 5. merge both endpoint views into canonical per-flow reports
        sink_reports = sink.collect_reports()
        sink_by = {(r["device_id"], r["flow_id"], r["role"]): r for r in sink_reports}
        for profile in inst.profiles:
            device_id = profile.device_id
            agent_reports = (agent_results.get(device_id) or {}).get("reports", [])
            agent_by = {(r["flow_id"], r["role"]): r for r in agent_reports}
            merged = []
            for spec in profile.flows:
                if spec.direction == Direction.UPLINK:
                    sender = agent_by.get((spec.flow_id, "sender"))
                    receiver = sink_by.get((device_id, spec.flow_id, "receiver"))
                else:
                    sender = sink_by.get((device_id, spec.flow_id, "sender"))
                    receiver = agent_by.get((spec.flow_id, "receiver"))
                flow = spec.to_json()
                flow["offered_bps"] = spec.offered_bps
                report = merge_reports(flow, sender, receiver, duration_ns=inst.duration_ns)
                report["device_id"] = device_id
                merged.append(report)
            step_record["reports"][device_id] = merged

        self._event(record, run_id, "step_finished", ordinal=inst.ordinal,
                    lost=list(step_record["lost_devices"]))
        return not step_record["lost_devices"] and not step_record["partial_devices"]

    async def _window_pump(
        self, run_id: str, sink: FlowEndpoint, start_ns: int, stop_ns: int, window_s: float
    ) -> None:
        """Publish per-window receive metrics live (not persisted)."""
        window_ns = round(window_s * 1_000_000_000)
        index = 0
        while start_ns + (index + 1) * window_ns <= stop_ns:
            await self.clock.sleep_until_ns(start_ns + (index + 1) * window_ns)
            self._event(
                None, run_id, "window",
                window_index=index,
                start_ns=start_ns + index * window_ns,
                flows=sink.live_window(index),
            )
            index += 1

    # -- annotations --------------------------------------------------------

    def annotate_completion(self, run_id: str, step_ordinal: int, completion_time_s: float) -> dict:
        """Attach a manually measured completion time to one tracked instance."""
        if completion_time_s < 0:
            raise ValueError("completion_time_s must be non-negative")
        record = self.store.load(run_id)
        steps = {s["ordinal"]: s for s in record["steps"]}
        if step_ordinal not in steps:
            raise ValueError(f"run has no step instance {step_ordinal}")
        if not steps[step_ordinal]["tracked"]:
            raise ValueError(f"step instance {step_ordinal} is untracked")
        record["annotations"][str(step_ordinal)] = completion_time_s
        record["events"].append(
            {
                "t_ns": time.time_ns(),
                "type": "annotation",
                "ordinal": step_ordinal,
                "completion_time_s": completion_time_s,
            }
        )
        self.store.update(record)
        return record
