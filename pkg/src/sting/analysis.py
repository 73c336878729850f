"""Offline analysis of persisted run records.

Builds one :class:`StepSummary` per interference level (pooling step
repetitions and multiple records), computes completion-time statistics, and
exports CSV tables plus a static plot bundle: stacked throughput / RTT /
frame-drop panels over time with step shading, and a completion-time box
plot per interference level.

Medians are standard order-statistic medians (even counts average the two
middle values); box statistics use linear-interpolation percentiles.
Untracked instances (e.g. introductory runs) are excluded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import percentile


class ZeroReferenceMedianError(ValueError):
    """Relative increase is undefined for a zero reference median."""


def median(values) -> float:
    ordered = sorted(values)
    if not ordered:
        raise ValueError("median of empty sample")
    mid = len(ordered) // 2
    if len(ordered) % 2 == 1:
        return float(ordered[mid])
    return (ordered[mid - 1] + ordered[mid]) / 2


def box_stats(values) -> dict:
    ordered = sorted(values)
    return {
        "min": float(ordered[0]),
        "p25": percentile(ordered, 25),
        "median": median(ordered),
        "p75": percentile(ordered, 75),
        "max": float(ordered[-1]),
    }


@dataclass
class StepSummary:
    """Pooled view of every tracked instance at one interference level."""

    active_device_count: int
    instance_count: int = 0
    windows: list[dict] = field(default_factory=list)
    rx_bytes: int = 0
    duration_ns: int = 0
    rtt_samples_ns: list[int] = field(default_factory=list)
    expected_packets: int = 0
    received_packets: int = 0
    frame_drops: int = 0
    completion_times: list[float] = field(default_factory=list)

    @property
    def throughput_series_bps(self) -> list[float]:
        return [w["throughput_bps"] for w in self.windows]

    @property
    def throughput_mean_bps(self) -> float | None:
        if not self.duration_ns:
            return None
        return self.rx_bytes * 8 * 1_000_000_000 / self.duration_ns

    @property
    def loss_ratio(self) -> float | None:
        if not self.expected_packets:
            return None
        return (self.expected_packets - self.received_packets) / self.expected_packets

    @property
    def rtt_mean_ns(self) -> float | None:
        if not self.rtt_samples_ns:
            return None
        return sum(self.rtt_samples_ns) / len(self.rtt_samples_ns)

    def rtt_percentiles(self) -> dict:
        if not self.rtt_samples_ns:
            return {"count": 0, "p50_ns": None, "p95_ns": None, "max_ns": None}
        ordered = sorted(self.rtt_samples_ns)
        return {
            "count": len(ordered),
            "p50_ns": percentile(ordered, 50),
            "p95_ns": percentile(ordered, 95),
            "max_ns": float(ordered[-1]),
        }

    @property
    def completion_median_s(self) -> float | None:
        if not self.completion_times:
            return None
        return median(self.completion_times)


def _sut_step_windows(step: dict, sut_device_id: str) -> list[dict]:
    """Per-window aggregates over the measured device's flows in one instance."""
    reports = step["reports"].get(sut_device_id, [])
    merged: dict[int, dict] = {}
    for report in reports:
        rx = report.get("rx")
        if rx:
            for index, win in enumerate(rx["windows"]):
                agg = merged.setdefault(
                    index,
                    {
                        "window_index": index,
                        "start_ns": win["start_ns"],
                        "rx_bytes": 0,
                        "throughput_bps": 0.0,
                        "rtt_sum_ns": 0.0,
                        "rtt_count": 0,
                        "frame_drops": 0,
                    },
                )
                agg["rx_bytes"] += win["rx_bytes"]
                agg["throughput_bps"] += win["throughput_bps"]
                agg["frame_drops"] += win["frame_drops"]
        rtt = report.get("rtt")
        if rtt:
            for index, win in enumerate(rtt.get("windows", [])):
                agg = merged.get(index)
                if agg is None:
                    continue
                if win["rtt_count"]:
                    agg["rtt_sum_ns"] += win["rtt_mean_ns"] * win["rtt_count"]
                    agg["rtt_count"] += win["rtt_count"]
    out = []
    for index in sorted(merged):
        agg = merged[index]
        agg["rtt_mean_ns"] = agg["rtt_sum_ns"] / agg["rtt_count"] if agg["rtt_count"] else None
        del agg["rtt_sum_ns"]
        out.append(agg)
    return out


def summarize(records: list[dict], sut_device_id: str) -> list[StepSummary]:
    """One summary per interference level, pooling repetitions and records.

    The interference level of an instance is its active device count
    excluding the measured device.  Deterministic and independent of record
    order: instances are pooled sorted by (created_at, run_id, ordinal).
    """
    ordered_records = sorted(
        records, key=lambda r: (r.get("created_at", ""), r.get("run_id", ""))
    )
    summaries: dict[int, StepSummary] = {}
    for record in ordered_records:
        annotations = record.get("annotations", {})
        for step in record["steps"]:
            if not step.get("tracked", True) or step.get("failed"):
                continue
            active = step["active_devices"]
            if sut_device_id not in active:
                continue
            level = len(active) - 1
            summary = summaries.setdefault(level, StepSummary(active_device_count=level))
            summary.instance_count += 1
            for win in _sut_step_windows(step, sut_device_id):
                summary.windows.append(
                    {"run_id": record["run_id"], "ordinal": step["ordinal"], **win}
                )
            for report in step["reports"].get(sut_device_id, []):
                rx = report.get("rx")
                if rx:
                    summary.rx_bytes += rx["bytes"]
                    if rx["max_seq_seen"] is not None:
                        summary.expected_packets += rx["max_seq_seen"] + 1
                        summary.received_packets += rx["packets"]
                    frames = rx.get("frames")
                    if frames:
                        summary.frame_drops += frames["dropped"]
                rtt = report.get("rtt")
                if rtt:
                    summary.rtt_samples_ns.extend(rtt.get("samples_ns", []))
            summary.duration_ns += step["stop_ns"] - step["start_ns"]
            annotation = annotations.get(str(step["ordinal"]))
            if annotation is not None:
                summary.completion_times.append(float(annotation))
    return [summaries[k] for k in sorted(summaries)]


def verify_expected(expected: dict, summaries: list[StepSummary]) -> list[dict]:
    """Check a reference scenario's expected-property manifest against results.

    Returns one ``{"name", "ok", "detail"}`` entry per applicable property.
    """
    checks = []

    def check(name, ok, detail):
        checks.append({"name": name, "ok": bool(ok), "detail": detail})

    counts = [s.active_device_count for s in summaries]
    if "step_count" in expected:
        check("step_count", len(summaries) == expected["step_count"],
              f"{len(summaries)} summaries, expected {expected['step_count']}")
    if "interferer_counts" in expected:
        check("interferer_counts", counts == list(expected["interferer_counts"]),
              f"{counts} vs {expected['interferer_counts']}")

    goodputs = [s.throughput_mean_bps for s in summaries]
    rtts = [s.rtt_mean_ns for s in summaries]
    if expected.get("sut_goodput") == "non_increasing":
        ok = all(g is not None for g in goodputs) and all(
            b <= a + 1e-6 for a, b in zip(goodputs, goodputs[1:])
        )
        check("sut_goodput_non_increasing", ok, f"{[round(g or -1) for g in goodputs]}")
    if expected.get("sut_rtt_mean") == "non_decreasing":
        ok = all(r is not None for r in rtts) and all(
            b >= a - 1e-6 for a, b in zip(rtts, rtts[1:])
        )
        check("sut_rtt_non_decreasing", ok, f"{[round((r or -1) / 1e6, 3) for r in rtts]} ms")
    if "frame_drops_first_step" in expected and summaries:
        check(
            "frame_drops_first_step",
            summaries[0].frame_drops == expected["frame_drops_first_step"],
            f"{summaries[0].frame_drops}",
        )
    if expected.get("frame_drops_last_step") == "positive" and summaries:
        check("frame_drops_last_step", summaries[-1].frame_drops > 0,
              f"{summaries[-1].frame_drops}")
    if "max_loaded_goodput_fraction" in expected and summaries:
        offered = expected["sut_offered_bps"]
        fraction = (goodputs[-1] or 0) / offered
        check(
            "loaded_goodput_fraction",
            fraction < expected["max_loaded_goodput_fraction"],
            f"{fraction:.3f} of offered",
        )
    if "min_rtt_ratio" in expected and summaries and rtts[0]:
        ratio = (rtts[-1] or 0) / rtts[0]
        check("rtt_ratio", ratio >= expected["min_rtt_ratio"], f"{ratio:.1f}x")
    return checks


def median_increase(reference: StepSummary, loaded: StepSummary) -> float:
    """Relative change of the loaded median completion time, in percent."""
    ref = reference.completion_median_s
    cur = loaded.completion_median_s
    if ref is None or cur is None:
        raise ValueError("both summaries need completion-time annotations")
    if ref == 0:
        raise ZeroReferenceMedianError("reference median completion time is zero")
    return 100.0 * (cur - ref) / ref


# -- exports ---------------------------------------------------------------

EXPORT_FORMATS = ("csv", "plots")

WINDOW_FIELDS = [
    "active_devices",
    "run_id",
    "ordinal",
    "window_index",
    "start_ns",
    "rx_bytes",
    "throughput_bps",
    "rtt_mean_ns",
    "rtt_count",
    "frame_drops",
]

COMPLETION_FIELDS = ["active_devices", "completion_time_s"]

SUMMARY_FIELDS = [
    "active_devices",
    "instances",
    "throughput_mean_bps",
    "rtt_p50_ns",
    "rtt_p95_ns",
    "rtt_max_ns",
    "rtt_mean_ns",
    "loss_ratio",
    "frame_drops",
    "completion_median_s",
]


def export_csv(summaries: list[StepSummary], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    windows_path = out_dir / "windows.csv"
    with open(windows_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=WINDOW_FIELDS)
        writer.writeheader()
        for summary in summaries:
            for win in summary.windows:
                writer.writerow(
                    {
                        "active_devices": summary.active_device_count,
                        "run_id": win["run_id"],
                        "ordinal": win["ordinal"],
                        "window_index": win["window_index"],
                        "start_ns": win["start_ns"],
                        "rx_bytes": win["rx_bytes"],
                        "throughput_bps": win["throughput_bps"],
                        "rtt_mean_ns": "" if win["rtt_mean_ns"] is None else win["rtt_mean_ns"],
                        "rtt_count": win["rtt_count"],
                        "frame_drops": win["frame_drops"],
                    }
                )
    paths.append(windows_path)

    completion_path = out_dir / "completion_times.csv"
    with open(completion_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=COMPLETION_FIELDS)
        writer.writeheader()
        for summary in summaries:
            for value in summary.completion_times:
                writer.writerow(
                    {"active_devices": summary.active_device_count, "completion_time_s": value}
                )
    paths.append(completion_path)

    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for summary in summaries:
            rtt = summary.rtt_percentiles()
            writer.writerow(
                {
                    "active_devices": summary.active_device_count,
                    "instances": summary.instance_count,
                    "throughput_mean_bps": summary.throughput_mean_bps or "",
                    "rtt_p50_ns": rtt["p50_ns"] if rtt["p50_ns"] is not None else "",
                    "rtt_p95_ns": rtt["p95_ns"] if rtt["p95_ns"] is not None else "",
                    "rtt_max_ns": rtt["max_ns"] if rtt["max_ns"] is not None else "",
                    "rtt_mean_ns": summary.rtt_mean_ns or "",
                    "loss_ratio": "" if summary.loss_ratio is None else summary.loss_ratio,
                    "frame_drops": summary.frame_drops,
                    "completion_median_s": (
                        "" if summary.completion_median_s is None else summary.completion_median_s
                    ),
                }
            )
    paths.append(summary_path)
    return paths


def export_plots(summaries: list[StepSummary], out_dir) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(10, 8))
    offset = 0
    shade_toggle = False
    for summary in summaries:
        xs = list(range(offset, offset + len(summary.windows)))
        if xs:
            axes[0].plot(
                xs, [w["throughput_bps"] / 1e6 for w in summary.windows], color="tab:blue"
            )
            rtt_ms = [
                (w["rtt_mean_ns"] / 1e6 if w["rtt_mean_ns"] is not None else math.nan)
                for w in summary.windows
            ]
            axes[1].plot(xs, rtt_ms, color="tab:orange")
            axes[2].plot(xs, [w["frame_drops"] for w in summary.windows], color="tab:red")
            if shade_toggle:
                for axis in axes:
                    axis.axvspan(xs[0], xs[-1] + 1, color="grey", alpha=0.15)
            mid = (xs[0] + xs[-1]) / 2
            axes[0].annotate(
                f"{summary.active_device_count} interferers",
                (mid, 0.95),
                xycoords=("data", "axes fraction"),
                ha="center",
                fontsize=8,
            )
        offset += len(summary.windows)
        shade_toggle = not shade_toggle
    axes[0].set_ylabel("throughput [Mbit/s]")
    axes[1].set_ylabel("RTT [ms]")
    axes[2].set_ylabel("frame drops")
    axes[2].set_xlabel("window")
    fig.suptitle("Measured device vs. interference level")
    fig.tight_layout()
    series_path = out_dir / "timeseries.png"
    fig.savefig(series_path, dpi=110)
    plt.close(fig)
    paths.append(series_path)

    with_completions = [s for s in summaries if s.completion_times]
    if with_completions:
        fig, axis = plt.subplots(figsize=(7, 5))
        axis.boxplot(
            [s.completion_times for s in with_completions],
            labels=[str(s.active_device_count) for s in with_completions],
        )
        axis.set_xlabel("active interferers")
        axis.set_ylabel("completion time [s]")
        axis.set_title("Course completion time distribution")
        fig.tight_layout()
        box_path = out_dir / "completion_box.png"
        fig.savefig(box_path, dpi=110)
        plt.close(fig)
        paths.append(box_path)
    return paths


def export(summaries: list[StepSummary], out_dir, formats=EXPORT_FORMATS) -> list[Path]:
    paths = []
    for fmt in formats:
        if fmt == "csv":
            paths.extend(export_csv(summaries, out_dir))
        elif fmt == "plots":
            paths.extend(export_plots(summaries, out_dir))
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    return paths
