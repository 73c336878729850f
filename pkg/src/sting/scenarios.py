"""Scenario encoding and the shipped reference scenarios.

A scenario is an ordered list of steps; each step names the active devices,
their traffic profiles, a duration and a repetition count.  Steps expand to
an ordered list of *instances* (repetition-expanded), which is what the
controller executes and what completion-time annotations index.

Two reference scenarios reproduce the standard test procedures at desk
scale on the emulated channel:

* the functional interference sweep: one measured device (SUT) plus
  [0, 2, 4, 6, 8] interferers, one minute per step, and
* the teleoperation course procedure: one untracked introductory run
  followed by two tracked repetitions at each interference level, with
  completion times entered as manual annotations.

Desk-scale rates are chosen so the aggregate offered load sweeps from well
below the emulated channel capacity to far above it, mirroring the regime
where six to eight interferers saturate a real channel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .traffic import DeviceTrafficProfile, Direction, FlowKind, FlowSpec, InvalidFlowSpec

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Scenario fails schema or semantic validation."""


@dataclass(frozen=True)
class TransportConfig:
    kind: str = "emulated"  # "emulated" | "udp"
    capacity_bps: float = 100e6
    propagation_ns: int = 200_000
    buffer_bytes: int = 524_288
    data_bind: str = "127.0.0.1:0"

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "capacity_bps": self.capacity_bps,
            "propagation_ns": self.propagation_ns,
            "buffer_bytes": self.buffer_bytes,
            "data_bind": self.data_bind,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TransportConfig":
        return cls(
            kind=obj.get("kind", "emulated"),
            capacity_bps=float(obj.get("capacity_bps", 100e6)),
            propagation_ns=int(obj.get("propagation_ns", 200_000)),
            buffer_bytes=int(obj.get("buffer_bytes", 524_288)),
            data_bind=obj.get("data_bind", "127.0.0.1:0"),
        )


@dataclass(frozen=True)
class Step:
    name: str
    duration_s: float
    profiles: tuple[DeviceTrafficProfile, ...]
    repetitions: int = 1
    tracked: bool = True

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "duration_s": self.duration_s,
            "repetitions": self.repetitions,
            "tracked": self.tracked,
            "devices": [p.to_json() for p in self.profiles],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Step":
        return cls(
            name=str(obj["name"]),
            duration_s=float(obj["duration_s"]),
            repetitions=int(obj.get("repetitions", 1)),
            tracked=bool(obj.get("tracked", True)),
            profiles=tuple(DeviceTrafficProfile.from_json(d) for d in obj.get("devices", [])),
        )


@dataclass(frozen=True)
class StepInstance:
    """One executable repetition of a step."""

    ordinal: int
    step_index: int
    instance_index: int
    name: str
    tracked: bool
    duration_ns: int
    profiles: tuple[DeviceTrafficProfile, ...]

    @property
    def active_devices(self) -> list[str]:
        return [p.device_id for p in self.profiles]


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    steps: tuple[Step, ...]
    transport: TransportConfig = field(default_factory=TransportConfig)
    window_s: float = 1.0
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.scenario_id:
            raise ScenarioError("scenario_id must be non-empty")
        if not self.steps:
            raise ScenarioError("scenario has no steps")
        if self.window_s <= 0:
            raise ScenarioError("window_s must be positive")
        if self.transport.kind not in ("emulated", "udp"):
            raise ScenarioError(f"unknown transport kind {self.transport.kind!r}")
        for step in self.steps:
            if step.duration_s <= 0:
                raise ScenarioError(f"step {step.name!r}: duration_s must be positive")
            if step.repetitions < 1:
                raise ScenarioError(f"step {step.name!r}: repetitions must be >= 1")
            seen = set()
            for profile in step.profiles:
                try:
                    profile.validate()
                except InvalidFlowSpec as exc:
                    raise ScenarioError(f"step {step.name!r}: {exc}") from exc
                if profile.device_id in seen:
                    raise ScenarioError(
                        f"step {step.name!r}: duplicate device {profile.device_id!r}"
                    )
                seen.add(profile.device_id)

    def referenced_devices(self) -> set[str]:
        return {p.device_id for step in self.steps for p in step.profiles}

    def instances(self) -> list[StepInstance]:
        """Repetition-expanded execution order."""
        out = []
        ordinal = 0
        for step_index, step in enumerate(self.steps):
            for rep in range(step.repetitions):
                out.append(
                    StepInstance(
                        ordinal=ordinal,
                        step_index=step_index,
                        instance_index=rep,
                        name=step.name,
                        tracked=step.tracked,
                        duration_ns=round(step.duration_s * 1_000_000_000),
                        profiles=step.profiles,
                    )
                )
                ordinal += 1
        return out

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario_id": self.scenario_id,
            "metadata": self.metadata,
            "window_s": self.window_s,
            "transport": self.transport.to_json(),
            "steps": [s.to_json() for s in self.steps],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Scenario":
        try:
            jsonschema.validate(obj, SCENARIO_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ScenarioError(f"scenario schema violation: {exc.message}") from exc
        scenario = cls(
            scenario_id=str(obj["scenario_id"]),
            metadata=dict(obj.get("metadata", {})),
            window_s=float(obj.get("window_s", 1.0)),
            transport=TransportConfig.from_json(obj.get("transport", {})),
            steps=tuple(Step.from_json(s) for s in obj["steps"]),
        )
        scenario.validate()
        return scenario


_IAT_SCHEMA = {
    "type": "object",
    "properties": {
        "model": {"enum": ["deterministic", "exponential", "onoff"]},
        "period_s": {"type": "number", "exclusiveMinimum": 0},
        "mean_s": {"type": "number", "exclusiveMinimum": 0},
        "on_s": {"type": "number", "exclusiveMinimum": 0},
        "off_s": {"type": "number", "minimum": 0},
        "burst_rate_bps": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["model"],
}

_FLOW_SCHEMA = {
    "type": "object",
    "properties": {
        "flow_id": {"type": "integer", "minimum": 0, "maximum": 65535},
        "kind": {
            "enum": ["constant_stream", "periodic_sensor", "bursty_transfer", "frame_video"]
        },
        "direction": {"enum": ["uplink", "downlink"]},
        "payload_bytes": {"type": "integer", "minimum": 48, "maximum": 65507},
        "seed": {"type": "integer"},
        "target_rate_bps": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "iat": {"oneOf": [_IAT_SCHEMA, {"type": "null"}]},
        "frame_rate_hz": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "frame_bytes": {"type": ["integer", "null"], "minimum": 1},
        "frame_deadline_ms": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "echo_interval_s": {"type": ["number", "null"], "exclusiveMinimum": 0},
    },
    "required": ["flow_id", "kind", "direction", "payload_bytes", "seed"],
}

_DEVICE_SCHEMA = {
    "type": "object",
    "properties": {
        "device_id": {"type": "string", "minLength": 1},
        "flows": {"type": "array", "items": _FLOW_SCHEMA},
    },
    "required": ["device_id", "flows"],
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Stress-test scenario",
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "scenario_id": {"type": "string", "minLength": 1},
        "metadata": {"type": "object"},
        "window_s": {"type": "number", "exclusiveMinimum": 0},
        "transport": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["emulated", "udp"]},
                "capacity_bps": {"type": "number", "exclusiveMinimum": 0},
                "propagation_ns": {"type": "integer", "minimum": 0},
                "buffer_bytes": {"type": "integer", "exclusiveMinimum": 0},
                "data_bind": {"type": "string"},
            },
        },
        "steps": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "duration_s": {"type": "number", "exclusiveMinimum": 0},
                    "repetitions": {"type": "integer", "minimum": 1},
                    "tracked": {"type": "boolean"},
                    "devices": {"type": "array", "items": _DEVICE_SCHEMA},
                },
                "required": ["name", "duration_s", "devices"],
            },
        },
    },
    "required": ["scenario_id", "steps"],
}


def load_scenario_file(path) -> Scenario:
    with open(path, encoding="utf-8") as handle:
        return Scenario.from_json(json.load(handle))


def save_scenario_file(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_json(), indent=2) + "\n", encoding="utf-8")


# -- reference scenarios --------------------------------------------------

SUT_DEVICE_ID = "sut"
INTERFERER_COUNTS = (0, 2, 4, 6, 8)

# SUT probes RTT densely; interferers sparsely (they exist to add load)
_SUT_ECHO_INTERVAL_S = 0.05
_INTERFERER_ECHO_INTERVAL_S = 0.5


@dataclass(frozen=True)
class ReferenceScenario:
    """A shipped scenario plus the properties its run is expected to show."""

    name: str
    scenario: Scenario
    expected: dict


def sut_profile(sut_rate_bps: float, seed: int = 101) -> DeviceTrafficProfile:
    """Measured-device profile: a video stream plus a constant stream.

    The offered rate is split evenly: a 25 Hz fragmented frame stream and a
    constant datagram stream, both probing RTT along the data path.
    Datagram sizes are comparable to the interferers' so the byte-granular
    tail drop binds all flows equally; much smaller SUT packets would slip
    into buffer gaps and mask the contention trend.
    """
    half = sut_rate_bps / 2
    frame_bytes = round(half / (25 * 8))
    fragment = min(12_500, max(4_800, math.ceil(frame_bytes / 2)))
    return DeviceTrafficProfile(
        device_id=SUT_DEVICE_ID,
        flows=(
            FlowSpec(
                flow_id=1,
                kind=FlowKind.FRAME_VIDEO,
                direction=Direction.UPLINK,
                payload_bytes=fragment,
                seed=seed,
                frame_rate_hz=25.0,
                frame_bytes=frame_bytes,
                frame_deadline_ms=100.0,
                echo_interval_s=_SUT_ECHO_INTERVAL_S,
            ),
            FlowSpec(
                flow_id=2,
                kind=FlowKind.CONSTANT_STREAM,
                direction=Direction.UPLINK,
                payload_bytes=12_400,
                seed=seed + 1,
                target_rate_bps=half,
                echo_interval_s=_SUT_ECHO_INTERVAL_S,
            ),
        ),
    )


def interferer_profile(
    index: int, interferer_rate_bps: float, seed: int = 201
) -> DeviceTrafficProfile:
    """One interference device offering a constant UDP stream.

    Payload sizes differ per device so the constant streams have pairwise
    different packet periods; independent real devices never run phase
    locked, and identical periods would make drop patterns an artifact of
    initial phase rather than of offered load.
    """
    return DeviceTrafficProfile(
        device_id=f"sting-{index:02d}",
        flows=(
            FlowSpec(
                flow_id=1,
                kind=FlowKind.CONSTANT_STREAM,
                direction=Direction.UPLINK,
                payload_bytes=11_400 + 150 * index,
                seed=seed + index,
                target_rate_bps=interferer_rate_bps,
                echo_interval_s=_INTERFERER_ECHO_INTERVAL_S,
            ),
        ),
    )


def build_functional_test(
    capacity_bps: float = 100e6,
    sut_rate_bps: float = 10e6,
    interferer_rate_bps: float = 30e6,
    step_duration_s: float = 60.0,
    seed: int = 1,
    counts: tuple[int, ...] = INTERFERER_COUNTS,
) -> Scenario:
    """Stepped-interference sweep: [0, 2, 4, 6, 8] interferers, 60 s each."""
    sut = sut_profile(sut_rate_bps, seed=seed * 100 + 1)
    steps = []
    for count in counts:
        interferers = tuple(
            interferer_profile(i + 1, interferer_rate_bps, seed=seed * 200 + 1)
            for i in range(count)
        )
        steps.append(
            Step(
                name=f"interferers-{count}",
                duration_s=step_duration_s,
                profiles=(sut, *interferers),
            )
        )
    return Scenario(
        scenario_id="functional-interference-sweep",
        metadata={"labels": ["reference", "functional"], "sut_device_id": SUT_DEVICE_ID},
        transport=TransportConfig(kind="emulated", capacity_bps=capacity_bps),
        steps=tuple(steps),
    )


def functional_reference(
    capacity_bps: float = 100e6,
    sut_rate_bps: float = 10e6,
    interferer_rate_bps: float = 30e6,
    step_duration_s: float = 60.0,
    seed: int = 1,
    counts: tuple[int, ...] = INTERFERER_COUNTS,
) -> ReferenceScenario:
    scenario = build_functional_test(
        capacity_bps, sut_rate_bps, interferer_rate_bps, step_duration_s, seed, counts
    )
    expected = {
        "step_count": len(counts),
        "interferer_counts": list(counts),
        "step_duration_s": step_duration_s,
        "sut_goodput": "non_increasing",
        "sut_rtt_mean": "non_decreasing",
    }
    if counts and counts[0] == 0:
        expected["frame_drops_first_step"] = 0
    # the saturation properties only apply to the full sweep
    if counts and counts[0] == 0 and counts[-1] == 8:
        expected["frame_drops_last_step"] = "positive"
        expected["sut_offered_bps"] = sut_rate_bps
        expected["max_loaded_goodput_fraction"] = 0.5
        expected["min_rtt_ratio"] = 5.0
    return ReferenceScenario(
        name="functional",
        scenario=scenario,
        expected=expected,
    )


def build_parcours_test(
    capacity_bps: float = 100e6,
    sut_rate_bps: float = 10e6,
    interferer_rate_bps: float = 30e6,
    run_duration_s: float = 30.0,
    seed: int = 2,
) -> Scenario:
    """Teleoperation-course procedure: 1 untracked + 2x5 tracked runs.

    Each tracked run carries an annotation slot for the manually measured
    course completion time.
    """
    sut = sut_profile(sut_rate_bps, seed=seed * 100 + 1)

    def step(name, count, repetitions, tracked):
        interferers = tuple(
            interferer_profile(i + 1, interferer_rate_bps, seed=seed * 200 + 1)
            for i in range(count)
        )
        return Step(
            name=name,
            duration_s=run_duration_s,
            repetitions=repetitions,
            tracked=tracked,
            profiles=(sut, *interferers),
        )

    steps = [step("introductory", 0, 1, False)]
    steps += [
        step(f"course-interferers-{count}", count, 2, True) for count in INTERFERER_COUNTS
    ]
    return Scenario(
        scenario_id="parcours-completion-time",
        metadata={"labels": ["reference", "parcours"], "sut_device_id": SUT_DEVICE_ID},
        transport=TransportConfig(kind="emulated", capacity_bps=capacity_bps),
        steps=tuple(steps),
    )


def parcours_reference(**kwargs) -> ReferenceScenario:
    scenario = build_parcours_test(**kwargs)
    tracked = [inst for inst in scenario.instances() if inst.tracked]
    return ReferenceScenario(
        name="parcours",
        scenario=scenario,
        expected={
            "total_runs": len(scenario.instances()),
            "tracked_runs": len(tracked),
            "annotation_slots": len(tracked),
            "interferer_counts_per_run": [len(i.profiles) - 1 for i in tracked],
        },
    )
