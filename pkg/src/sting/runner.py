"""In-process emulated worlds: channel + bus + agents + controller.

An emulated run wires every scenario device as an in-process agent attached
to one shared-capacity channel, with the control plane on a local bus.  On a
virtual-time loop the whole procedure executes in milliseconds-to-seconds of
wall clock; on a live loop the identical code runs paced in real time.
"""

from __future__ import annotations

import asyncio
import os

from .agent import Agent
from .bus import LocalBus
from .controller import SINK_DEVICE_ID, Controller
from .scenarios import Scenario
from .storage import RunStore
from .transport import EmulatedChannel
from .vtime import Clock, run_virtual

ENV_SEED = "STING_SEED"


def seed_override_from_env() -> int | None:
    raw = os.environ.get(ENV_SEED)
    return int(raw) if raw else None


class EmulatedAttachment:
    """Agents plus their shared emulated channel for one scenario."""

    def __init__(self, channel: EmulatedChannel, agents: list[Agent]):
        self.channel = channel
        self.agents = agents

    @classmethod
    async def create(
        cls,
        scenario: Scenario,
        bus,
        clock: Clock | None = None,
        seed_override: int | None = None,
        on_tx=None,
        heartbeat_s: float = 1.0,
    ) -> "EmulatedAttachment":
        clock = clock or Clock.running()
        tcfg = scenario.transport
        channel = EmulatedChannel(
            capacity_bps=tcfg.capacity_bps,
            propagation_ns=tcfg.propagation_ns,
            buffer_bytes=tcfg.buffer_bytes,
            clock=clock,
        )
        agents = []
        for device_id in sorted(scenario.referenced_devices()):
            transport = channel.attach(device_id)
            agent = Agent(
                device_id,
                bus,
                transport,
                clock,
                heartbeat_s=heartbeat_s,
                seed_override=seed_override,
                on_tx=on_tx,
            )
            await agent.start()
            agents.append(agent)
        # let the initial heartbeats propagate through the bus microtasks
        for _ in range(3):
            await asyncio.sleep(0)
        return cls(channel, agents)

    def sink_transport(self):
        return self.channel.attach(SINK_DEVICE_ID)

    async def close(self) -> None:
        for agent in self.agents:
            await agent.shutdown()
            agent.endpoint.transport.close()


async def run_scenario(
    scenario: Scenario,
    store: RunStore,
    seed_override: int | None = None,
    on_tx=None,
    operator: str | None = None,
    heartbeat_s: float = 1.0,
) -> dict:
    """Execute an emulated scenario end to end on the current loop."""
    if scenario.transport.kind != "emulated":
        raise ValueError("run_scenario only drives emulated transports in-process")
    clock = Clock.running()
    bus = LocalBus(clock)
    attachment: EmulatedAttachment | None = None

    async def sink_factory(_tcfg):
        assert attachment is not None
        return attachment.sink_transport()

    # the controller subscribes first so it sees the agents' first heartbeats
    controller = Controller(bus, store, sink_factory, clock)
    attachment = await EmulatedAttachment.create(
        scenario,
        bus,
        clock,
        seed_override=seed_override,
        on_tx=on_tx,
        heartbeat_s=heartbeat_s,
    )
    try:
        record = await controller.execute_scenario(scenario, operator=operator)
    finally:
        controller.shutdown()
        await attachment.close()
    return record


def run_scenario_virtual(
    scenario: Scenario,
    store: RunStore,
    seed_override: int | None = None,
    on_tx=None,
    operator: str | None = None,
) -> dict:
    """Execute an emulated scenario in virtual time; returns the run record."""
    return run_virtual(
        run_scenario(
            scenario,
            store,
            seed_override=seed_override,
            on_tx=on_tx,
            operator=operator,
        )
    )
