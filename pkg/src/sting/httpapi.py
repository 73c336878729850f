"""North-bound HTTP JSON API for CLI and web clients.

Serves the device registry, scenario storage, run lifecycle (start, abort,
annotate), persisted records, and a server-push event stream per run
(``GET /runs/{id}/live``, server-sent events) carrying step transitions and
per-window receive metrics.  The scenario JSON schema is exposed so clients
can generate configuration forms from the single source of truth.

State changes happen only through these endpoints; everything a client
displays is reproducible from ``GET /runs/{id}``.
"""

from __future__ import annotations

import asyncio
import json
import logging

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .bus import BrokerServer
from .controller import Controller, ControllerBusy
from .runner import EmulatedAttachment
from .scenarios import SCENARIO_SCHEMA, Scenario, ScenarioError
from .storage import RunNotFound, RunStore
from .transport import UdpTransport
from .vtime import Clock

log = logging.getLogger(__name__)


class ServerState:
    """Everything one controller process owns: bus, controller, runs, SSE."""

    def __init__(self, store: RunStore, arm_lead_s: float = 0.5):
        self.store = store
        self.arm_lead_s = arm_lead_s
        self.clock: Clock | None = None
        self.bus: BrokerServer | None = None
        self.controller: Controller | None = None
        self.scenarios: dict[str, Scenario] = {}
        self.active_record: dict | None = None
        self._run_task: asyncio.Task | None = None
        self._attachment: EmulatedAttachment | None = None
        self._subscribers: list[asyncio.Queue] = []

    async def start(self, control_bind: str = "127.0.0.1:7010") -> str:
        self.clock = Clock.running()
        self.bus = BrokerServer(self.clock)
        control_addr = await self.bus.start(control_bind)
        self.controller = Controller(
            self.bus,
            self.store,
            self._sink_factory,
            self.clock,
            arm_lead_s=self.arm_lead_s,
        )
        self.bus.subscribe("sting/run/+/events", self._on_run_event)
        return control_addr

    async def stop(self) -> None:
        if self._run_task is not None:
            self._run_task.cancel()
        if self._attachment is not None:
            await self._attachment.close()
        if self.controller is not None:
            self.controller.shutdown()
        if self.bus is not None:
            await self.bus.stop()

    async def _sink_factory(self, tcfg):
        if tcfg.kind == "udp":
            return await UdpTransport.create(tcfg.data_bind)
        assert self._attachment is not None, "emulated attachment missing"
        return self._attachment.sink_transport()

    def _on_run_event(self, message: dict) -> None:
        for queue in list(self._subscribers):
            if queue.full():
                try:
                    queue.get_nowait()
                except asyncio.QueueEmpty:
                    pass
            queue.put_nowait(message)

    def subscribe_events(self) -> asyncio.Queue:
        queue: asyncio.Queue = asyncio.Queue(maxsize=4096)
        self._subscribers.append(queue)
        return queue

    def unsubscribe_events(self, queue: asyncio.Queue) -> None:
        if queue in self._subscribers:
            self._subscribers.remove(queue)

    async def start_run(self, scenario: Scenario, operator: str | None) -> str:
        """Launch a run as a background task; returns its id once assigned."""
        assert self.controller is not None
        if self.controller.active_run_id is not None or self._run_task is not None:
            raise ControllerBusy("a run is already active")
        if scenario.transport.kind == "emulated":
            # in-process devices on a fresh shared channel, paced by this loop
            self._attachment = await EmulatedAttachment.create(scenario, self.bus, self.clock)

        async def _execute():
            try:
                record = await self.controller.execute_scenario(scenario, operator=operator)
                self.active_record = record
                return record
            finally:
                self._run_task = None
                if self._attachment is not None:
                    await self._attachment.close()
                    self._attachment = None

        self._run_task = asyncio.ensure_future(_execute())
        # the run id is assigned synchronously inside execute_scenario; poll
        # a few loop ticks so the response can carry it
        for _ in range(50):
            if self.controller.active_run_id is not None:
                break
            if self._run_task is None or self._run_task.done():
                break
            await asyncio.sleep(0.01)
        if self.controller.active_run_id is None:
            task = self._run_task
            if task is not None and task.done() and task.exception() is not None:
                raise task.exception()
            record = self.active_record
            if record is not None:
                return record["run_id"]
            raise RuntimeError("run failed to start")
        return self.controller.active_run_id


def create_app(state: ServerState, ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="sting controller", version="0.1.0")

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    @app.get("/agents")
    async def get_agents():
        assert state.controller is not None
        return {"agents": state.controller.registry.snapshot()}

    @app.get("/schema/scenario")
    async def get_schema():
        return SCENARIO_SCHEMA

    @app.get("/scenarios")
    async def list_scenarios():
        return {"scenarios": [s.to_json() for s in state.scenarios.values()]}

    @app.post("/scenarios")
    async def post_scenario(request: Request):
        body = await request.json()
        try:
            scenario = Scenario.from_json(body)
        except ScenarioError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        state.scenarios[scenario.scenario_id] = scenario
        return {"scenario_id": scenario.scenario_id}

    @app.get("/scenarios/{scenario_id}")
    async def get_scenario(scenario_id: str):
        scenario = state.scenarios.get(scenario_id)
        if scenario is None:
            raise HTTPException(status_code=404, detail="unknown scenario")
        return scenario.to_json()

    @app.get("/runs")
    async def list_runs():
        assert state.controller is not None
        return {
            "runs": state.store.list_runs(),
            "active_run_id": state.controller.active_run_id,
        }

    @app.post("/runs")
    async def start_run(request: Request):
        body = await request.json()
        if "scenario" in body:
            try:
                scenario = Scenario.from_json(body["scenario"])
            except ScenarioError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
        else:
            scenario = state.scenarios.get(body.get("scenario_id", ""))
            if scenario is None:
                raise HTTPException(status_code=404, detail="unknown scenario")
        try:
            run_id = await state.start_run(scenario, body.get("operator"))
        except ControllerBusy as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ScenarioError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"run_id": run_id}

    @app.post("/runs/{run_id}/abort")
    async def abort_run(run_id: str):
        assert state.controller is not None
        if state.controller.active_run_id != run_id:
            raise HTTPException(status_code=409, detail="run is not active")
        state.controller.abort_active()
        return {"run_id": run_id, "aborting": True}

    @app.post("/runs/{run_id}/annotate")
    async def annotate(run_id: str, request: Request):
        assert state.controller is not None
        body = await request.json()
        try:
            record = state.controller.annotate_completion(
                run_id,
                int(body["step_ordinal"]),
                float(body["completion_time_s"]),
            )
        except RunNotFound:
            raise HTTPException(status_code=404, detail="unknown run")
        except (KeyError, TypeError):
            raise HTTPException(status_code=422, detail="step_ordinal and completion_time_s required")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"run_id": run_id, "annotations": record["annotations"]}

    @app.get("/runs/{run_id}")
    async def get_run(run_id: str):
        assert state.controller is not None
        if state.controller.active_run_id == run_id:
            return JSONResponse({"active": True, "run_id": run_id})
        try:
            return state.store.load(run_id)
        except RunNotFound:
            raise HTTPException(status_code=404, detail="unknown run")

    @app.get("/runs/{run_id}/live")
    async def live(run_id: str):
        queue = state.subscribe_events()

        async def stream():
            try:
                hello = {"type": "hello", "run_id": run_id}
                yield f"data: {json.dumps(hello)}\n\n"
                while True:
                    try:
                        message = await asyncio.wait_for(queue.get(), timeout=15.0)
                    except asyncio.TimeoutError:
                        yield ": keepalive\n\n"
                        continue
                    if message["topic"] != f"sting/run/{run_id}/events":
                        continue
                    yield f"data: {json.dumps(message['payload'])}\n\n"
            finally:
                state.unsubscribe_events(queue)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app
