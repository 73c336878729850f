"""Command-line entry points: ``sting-ctl`` and ``sting-agent``.

One code base serves both roles (controller and agent subcommands share a
version handshake through the control-plane schema), so deployments cannot
drift apart.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
Machine-readable output goes to stdout only with ``--json``.

Environment: ``STING_SEED`` overrides flow seeds for reproducibility,
``STING_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
import time
import urllib.request
from pathlib import Path

from . import analysis
from .runner import run_scenario, run_scenario_virtual, seed_override_from_env
from .scenarios import (
    SUT_DEVICE_ID,
    Scenario,
    ScenarioError,
    functional_reference,
    load_scenario_file,
)
from .storage import RunNotFound, RunStore

log = logging.getLogger(__name__)

DEFAULT_STORE = "./sting-data"


def _setup_logging() -> None:
    level = os.environ.get("STING_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _emit(args, payload: dict, human_lines: list[str]) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def _http_json(method: str, url: str, body: dict | None = None) -> dict:
    data = json.dumps(body).encode() if body is not None else None
    request = urllib.request.Request(
        url, data=data, method=method, headers={"Content-Type": "application/json"}
    )
    with urllib.request.urlopen(request, timeout=30) as response:
        return json.loads(response.read())


# -- sting-ctl subcommands --------------------------------------------------


def _cmd_serve(args) -> int:
    import uvicorn

    from .httpapi import ServerState, create_app

    async def _serve() -> int:
        state = ServerState(RunStore(args.store), arm_lead_s=args.arm_lead)
        control_addr = await state.start(args.control)
        print(f"control plane (agents): {control_addr}", file=sys.stderr)
        print(f"http api: http://{args.listen}", file=sys.stderr)
        host, _, port = args.listen.rpartition(":")
        config = uvicorn.Config(
            create_app(state, ui_dir=args.ui),
            host=host,
            port=int(port),
            log_level="warning",
        )
        server = uvicorn.Server(config)
        try:
            await server.serve()
        finally:
            await state.stop()
        return 0

    return asyncio.run(_serve())


def _cmd_demo(args, parser) -> int:
    if args.steps < 1 or args.steps > 5:
        parser.error("--steps must be between 1 and 5")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reference = functional_reference(
        capacity_bps=args.capacity_bps,
        sut_rate_bps=args.sut_rate_bps,
        interferer_rate_bps=args.interferer_rate_bps,
        seed=args.seed,
        counts=tuple([0, 2, 4, 6, 8][: args.steps]),
    )
    store = RunStore(args.store or out_dir / "store")
    started = time.monotonic()
    record = run_scenario_virtual(
        reference.scenario, store, seed_override=seed_override_from_env()
    )
    elapsed = time.monotonic() - started
    summaries = analysis.summarize([record], SUT_DEVICE_ID)
    checks = analysis.verify_expected(reference.expected, summaries)
    paths = analysis.export(summaries, out_dir)
    ok = all(c["ok"] for c in checks)

    lines = [f"run {record['run_id']} finished in {elapsed:.1f}s wall ({record['status']})"]
    for summary in summaries:
        rtt_ms = (summary.rtt_mean_ns or 0) / 1e6
        lines.append(
            f"  interferers={summary.active_device_count}: "
            f"goodput={(summary.throughput_mean_bps or 0) / 1e6:.2f} Mbit/s "
            f"rtt={rtt_ms:.2f} ms loss={summary.loss_ratio if summary.loss_ratio is not None else 'n/a'} "
            f"frame_drops={summary.frame_drops}"
        )
    for check in checks:
        lines.append(f"  [{'ok' if check['ok'] else 'FAIL'}] {check['name']}: {check['detail']}")
    lines.append(f"wrote {', '.join(str(p) for p in paths)}")
    _emit(
        args,
        {
            "run_id": record["run_id"],
            "status": record["status"],
            "wall_s": elapsed,
            "checks": checks,
            "outputs": [str(p) for p in paths],
        },
        lines,
    )
    return 0 if ok else 1


def _cmd_scenario_validate(args) -> int:
    try:
        scenario = load_scenario_file(args.file)
    except (ScenarioError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 1
    _emit(
        args,
        {"scenario_id": scenario.scenario_id, "valid": True},
        [f"scenario {scenario.scenario_id!r} is valid "
         f"({len(scenario.steps)} steps, {len(scenario.instances())} instances)"],
    )
    return 0


def _cmd_scenario_run(args) -> int:
    try:
        scenario = load_scenario_file(args.file)
    except (ScenarioError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 1

    if args.controller:
        result = _http_json(
            "POST",
            f"{args.controller.rstrip('/')}/runs",
            {"scenario": scenario.to_json(), "operator": args.operator},
        )
        _emit(args, result, [f"started run {result.get('run_id')} on {args.controller}"])
        return 0

    if scenario.transport.kind != "emulated":
        print(
            "scenario uses the udp transport; pass --controller URL of a running "
            "`sting-ctl serve` instance",
            file=sys.stderr,
        )
        return 1
    store = RunStore(args.store)
    seed_override = seed_override_from_env()
    if args.real:
        record = asyncio.run(
            run_scenario(scenario, store, seed_override=seed_override, operator=args.operator)
        )
    else:
        record = run_scenario_virtual(
            scenario, store, seed_override=seed_override, operator=args.operator
        )
    _emit(
        args,
        {"run_id": record["run_id"], "status": record["status"]},
        [f"run {record['run_id']} finished: {record['status']}"],
    )
    return 0 if record["status"] in ("complete", "partial") else 1


def _cmd_runs_list(args) -> int:
    store = RunStore(args.store)
    entries = store.list_runs()
    _emit(
        args,
        {"runs": entries},
        [
            f"{e['run_id']}  {e.get('created_at', '')}  {e.get('scenario_id', '')}  "
            f"{e.get('status', '')}"
            for e in entries
        ]
        or ["no runs"],
    )
    return 0


def _cmd_runs_show(args) -> int:
    store = RunStore(args.store)
    try:
        record = store.load(args.run_id)
    except RunNotFound:
        print(f"unknown run {args.run_id}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(record, sort_keys=True))
        return 0
    print(f"run {record['run_id']}  status={record['status']}  created={record['created_at']}")
    print(f"scenario: {record['scenario']['scenario_id']}")
    for step in record["steps"]:
        reports = step.get("reports", {})
        total_rx = sum(
            report["rx"]["bytes"]
            for device_reports in reports.values()
            for report in device_reports
            if report.get("rx")
        )
        print(
            f"  step {step['ordinal']} ({step['name']}): devices={len(step['active_devices'])} "
            f"rx={total_rx} B tracked={step['tracked']}"
            + (" FAILED" if step.get("failed") else "")
        )
    if record.get("annotations"):
        print(f"annotations: {record['annotations']}")
    return 0


def _cmd_runs_export(args) -> int:
    store = RunStore(args.store)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for run_id in args.run_ids:
        try:
            record = store.load(run_id)
        except RunNotFound:
            print(f"unknown run {run_id}", file=sys.stderr)
            return 1
        path = out_dir / f"{run_id}.json"
        path.write_text(json.dumps(record, sort_keys=True, indent=1), encoding="utf-8")
        written.append(str(path))
    _emit(args, {"written": written}, [f"wrote {p}" for p in written])
    return 0


def _cmd_analyze(args) -> int:
    store = RunStore(args.store)
    records = []
    for run_id in args.run_ids:
        try:
            records.append(store.load(run_id))
        except RunNotFound:
            print(f"unknown run {run_id}", file=sys.stderr)
            return 1
    summaries = analysis.summarize(records, args.sut)
    formats = tuple(args.formats.split(","))
    try:
        paths = analysis.export(summaries, args.out, formats)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    lines = []
    for summary in summaries:
        rtt = summary.rtt_percentiles()
        lines.append(
            f"interferers={summary.active_device_count}: instances={summary.instance_count} "
            f"goodput={(summary.throughput_mean_bps or 0) / 1e6:.2f} Mbit/s "
            f"rtt_p50={(rtt['p50_ns'] or 0) / 1e6:.2f} ms frame_drops={summary.frame_drops} "
            f"completion_median={summary.completion_median_s}"
        )
    lines.extend(f"wrote {p}" for p in paths)
    _emit(
        args,
        {
            "summaries": [
                {
                    "active_devices": s.active_device_count,
                    "instances": s.instance_count,
                    "throughput_mean_bps": s.throughput_mean_bps,
                    "rtt": s.rtt_percentiles(),
                    "loss_ratio": s.loss_ratio,
                    "frame_drops": s.frame_drops,
                    "completion_median_s": s.completion_median_s,
                }
                for s in summaries
            ],
            "outputs": [str(p) for p in paths],
        },
        lines,
    )
    return 0


def _build_ctl_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sting-ctl", description="controller, scenario runner and analysis"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the controller server")
    serve.add_argument("--listen", default="127.0.0.1:7000", help="HTTP api host:port")
    serve.add_argument("--control", default="127.0.0.1:7010", help="agent control-plane host:port")
    serve.add_argument("--store", default=DEFAULT_STORE, help="run-record directory")
    serve.add_argument("--arm-lead", type=float, default=0.5, help="seconds between arm and start")
    serve.add_argument("--ui", default=None, help="serve a built dashboard from this directory")

    demo = sub.add_parser("demo", help="one-command emulated reproduction of the interference sweep")
    demo.add_argument("--out", default="./sting-demo", help="output directory")
    demo.add_argument("--steps", type=int, default=5, help="number of interference steps (1-5)")
    demo.add_argument("--seed", type=int, default=1)
    demo.add_argument("--capacity-bps", type=float, default=100e6)
    demo.add_argument("--sut-rate-bps", type=float, default=10e6)
    demo.add_argument("--interferer-rate-bps", type=float, default=30e6)
    demo.add_argument("--store", default=None, help="run-record directory (default: <out>/store)")
    demo.add_argument("--json", action="store_true")

    scenario = sub.add_parser("scenario", help="validate or execute scenario files")
    scenario_sub = scenario.add_subparsers(dest="scenario_command", required=True)
    validate = scenario_sub.add_parser("validate")
    validate.add_argument("file")
    validate.add_argument("--json", action="store_true")
    run = scenario_sub.add_parser("run")
    run.add_argument("file")
    run.add_argument("--store", default=DEFAULT_STORE)
    run.add_argument("--operator", default=None)
    run.add_argument("--controller", default=None, help="POST to a running controller instead")
    run.add_argument(
        "--real", action="store_true", help="pace the emulated run in real time"
    )
    run.add_argument("--json", action="store_true")

    runs = sub.add_parser("runs", help="inspect persisted run records")
    runs_sub = runs.add_subparsers(dest="runs_command", required=True)
    runs_list = runs_sub.add_parser("list")
    runs_list.add_argument("--store", default=DEFAULT_STORE)
    runs_list.add_argument("--json", action="store_true")
    runs_show = runs_sub.add_parser("show")
    runs_show.add_argument("run_id")
    runs_show.add_argument("--store", default=DEFAULT_STORE)
    runs_show.add_argument("--json", action="store_true")
    runs_export = runs_sub.add_parser("export")
    runs_export.add_argument("run_ids", nargs="+")
    runs_export.add_argument("--store", default=DEFAULT_STORE)
    runs_export.add_argument("--out", required=True)
    runs_export.add_argument("--json", action="store_true")

    analyze = sub.add_parser("analyze", help="summarize runs and export CSV/plots")
    analyze.add_argument("run_ids", nargs="+")
    analyze.add_argument("--sut", default=SUT_DEVICE_ID, help="measured device id")
    analyze.add_argument("--store", default=DEFAULT_STORE)
    analyze.add_argument("--out", required=True)
    analyze.add_argument("--formats", default="csv,plots")
    analyze.add_argument("--json", action="store_true")

    return parser


def ctl_main(argv=None) -> int:
    _setup_logging()
    parser = _build_ctl_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "serve":
            return _cmd_serve(args)
        if args.command == "demo":
            return _cmd_demo(args, parser)
        if args.command == "scenario":
            if args.scenario_command == "validate":
                return _cmd_scenario_validate(args)
            return _cmd_scenario_run(args)
        if args.command == "runs":
            if args.runs_command == "list":
                return _cmd_runs_list(args)
            if args.runs_command == "show":
                return _cmd_runs_show(args)
            return _cmd_runs_export(args)
        if args.command == "analyze":
            return _cmd_analyze(args)
    except KeyboardInterrupt:
        return 130
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    parser.error("no command")
    return 2


# -- sting-agent -------------------------------------------------------------


async def _agent_async(args) -> int:
    from .agent import Agent
    from .bus import BrokerClient
    from .transport import UdpTransport

    client = BrokerClient()
    deadline = time.monotonic() + args.connect_timeout
    while True:
        try:
            await client.connect(args.controller)
            break
        except OSError as exc:
            if time.monotonic() >= deadline:
                print(f"cannot reach controller {args.controller}: {exc}", file=sys.stderr)
                return 1
            await asyncio.sleep(1.0)
    transport = await UdpTransport.create(args.bind)
    seed_env = os.environ.get("STING_SEED")
    agent = Agent(
        args.id,
        client,
        transport,
        heartbeat_s=args.heartbeat,
        spool_path=args.spool,
        seed_override=int(seed_env) if seed_env else None,
    )
    await agent.start()
    print(
        f"agent {args.id}: control={args.controller} data={transport.local_addr}",
        file=sys.stderr,
    )
    await client.closed.wait()
    print("controller connection closed", file=sys.stderr)
    await agent.shutdown()
    transport.close()
    return 0


def agent_main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="sting-agent", description="traffic-generating end device")
    parser.add_argument("--id", required=True, help="device id")
    parser.add_argument("--controller", required=True, help="controller control-plane host:port")
    parser.add_argument("--transport", choices=("udp", "emulated"), default="udp")
    parser.add_argument("--bind", default="0.0.0.0:0", help="UDP data-plane bind address")
    parser.add_argument("--heartbeat", type=float, default=1.0)
    parser.add_argument("--spool", default=None, help="append-only results spool file (JSON lines)")
    parser.add_argument("--connect-timeout", type=float, default=30.0)
    args = parser.parse_args(argv)
    if args.transport == "emulated":
        parser.error(
            "emulated-transport agents run inside the controller process; "
            "start an emulated scenario via `sting-ctl scenario run` or `sting-ctl demo`"
        )
    if args.spool is None:
        args.spool = f"./sting-agent-{args.id}.jsonl"
    try:
        return asyncio.run(_agent_async(args))
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(ctl_main())
