"""Streaming per-flow accumulators for link-quality metrics.

One :class:`FlowMetrics` instance accumulates everything a single endpoint
observes for a single flow: tumbling-window byte/packet counts, RTT samples
from echo replies, sequence-gap loss, RFC-3550-style jitter and video frame
completion.  Reports from the two ends of a flow (the sender measures RTT,
the receiver measures delivery) are merged into one canonical per-flow
report with :func:`merge_reports`.

Definitions used throughout:

* throughput: non-duplicate received bytes, binned into tumbling windows of
  ``window_s`` anchored at ``origin_ns``; bits per second per window.
* loss: computed at finalize as ``(max_seq + 1 - received) / (max_seq + 1)``,
  i.e. reordering never counts as loss; ``None`` when nothing was received.
* jitter: ``J += (|D| - J) / 16`` over consecutive arrivals, where ``D`` is
  the change in (rx - tx) transit time.
* frame drop: a frame whose fragments do not all arrive within the deadline
  of its first fragment's arrival (or never all arrive).  Frame ids missing
  entirely between the lowest and highest observed id also count as dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .probes import TYPE_ECHO_REPLY, ProbePacket, rtt_ns

NS_PER_S = 1_000_000_000


def percentile(sorted_values: list, q: float) -> float:
    """Linear-interpolation percentile (q in [0, 100]) of pre-sorted values."""
    if not sorted_values:
        raise ValueError("percentile of empty sample")
    if len(sorted_values) == 1:
        return float(sorted_values[0])
    idx = q / 100 * (len(sorted_values) - 1)
    lo = math.floor(idx)
    hi = math.ceil(idx)
    if lo == hi:
        return float(sorted_values[lo])
    frac = idx - lo
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * frac


@dataclass
class _Window:
    rx_bytes: int = 0
    rx_packets: int = 0
    rtt_sum_ns: int = 0
    rtt_count: int = 0
    frame_drops: int = 0


@dataclass
class _Frame:
    fragment_count: int
    first_rx_ns: int
    last_rx_ns: int
    received: set[int] = field(default_factory=set)


class FlowMetrics:
    """Streaming accumulator for one flow as seen by one endpoint.

    ``origin_ns`` anchors the tumbling windows (defaults to the first packet's
    arrival).  ``frame_deadline_ms`` switches frame accounting on; leave it
    None for non-video flows.
    """

    def __init__(
        self,
        flow_id: int,
        window_s: float = 1.0,
        origin_ns: int | None = None,
        frame_deadline_ms: float | None = None,
    ):
        if window_s <= 0:
            raise ValueError("window_s must be positive")
        self.flow_id = flow_id
        self.window_s = window_s
        self.window_ns = round(window_s * NS_PER_S)
        self.origin_ns = origin_ns
        self.frame_deadline_ns = (
            round(frame_deadline_ms * 1_000_000) if frame_deadline_ms is not None else None
        )
        self._windows: dict[int, _Window] = {}
        self._seen_seqs: set[int] = set()
        self.rx_bytes = 0
        self.rx_packets = 0
        self.duplicate_count = 0
        self.max_seq_seen: int | None = None
        self.rtt_samples_ns: list[int] = []
        self.jitter_ns = 0.0
        self._prev_transit_ns: int | None = None
        self._frames: dict[int, _Frame] = {}
        self.last_rx_ns: int | None = None

    def _window_for(self, rx_ns: int) -> _Window:
        index = (rx_ns - self.origin_ns) // self.window_ns
        win = self._windows.get(index)
        if win is None:
            win = _Window()
            self._windows[index] = win
        return win

    def ingest(self, packet: ProbePacket, rx_ns: int, wire_bytes: int) -> None:
        """Account one received packet of this flow.

        Duplicate sequence numbers are counted separately and excluded from
        every other statistic.  Echo replies additionally contribute an RTT
        sample; all non-duplicate packets contribute to windows and jitter.
        """
        if packet.seq in self._seen_seqs:
            self.duplicate_count += 1
            return
        self._seen_seqs.add(packet.seq)

        if self.origin_ns is None:
            self.origin_ns = rx_ns
        self.last_rx_ns = rx_ns if self.last_rx_ns is None else max(self.last_rx_ns, rx_ns)

        win = self._window_for(rx_ns)
        win.rx_bytes += wire_bytes
        win.rx_packets += 1
        self.rx_bytes += wire_bytes
        self.rx_packets += 1
        if self.max_seq_seen is None or packet.seq > self.max_seq_seen:
            self.max_seq_seen = packet.seq

        transit = rx_ns - packet.tx_timestamp_ns
        if self._prev_transit_ns is not None:
            delta = abs(transit - self._prev_transit_ns)
            self.jitter_ns += (delta - self.jitter_ns) / 16
        self._prev_transit_ns = transit

        if packet.packet_type == TYPE_ECHO_REPLY:
            sample = rtt_ns(packet, rx_ns)
            self.rtt_samples_ns.append(sample)
            win.rtt_sum_ns += sample
            win.rtt_count += 1

        if self.frame_deadline_ns is not None:
            frame = self._frames.get(packet.frame_id)
            if frame is None:
                frame = _Frame(
                    fragment_count=packet.fragment_count, first_rx_ns=rx_ns, last_rx_ns=rx_ns
                )
                self._frames[packet.frame_id] = frame
            frame.received.add(packet.fragment_index)
            frame.last_rx_ns = max(frame.last_rx_ns, rx_ns)
            frame.fragment_count = max(frame.fragment_count, packet.fragment_count)

    def _frame_is_dropped(self, frame: _Frame) -> bool:
        if len(frame.received) < frame.fragment_count:
            return True
        return frame.last_rx_ns - frame.first_rx_ns > self.frame_deadline_ns

    def frame_drops(self) -> int:
        """Dropped frame count: incomplete, late, or missing between observed ids."""
        if self.frame_deadline_ns is None:
            return 0
        dropped = sum(1 for f in self._frames.values() if self._frame_is_dropped(f))
        if self._frames:
            lo = min(self._frames)
            hi = max(self._frames)
            dropped += (hi - lo + 1) - len(self._frames)
        return dropped

    def finalize(self, end_ns: int | None = None) -> dict:
        """Close the run and emit the endpoint's report for this flow.

        The window series covers ``[origin_ns, end_ns)`` contiguously with
        zero-filled gaps.  With no packets and no ``end_ns``, the series is
        empty and loss is reported as ``None``.
        """
        if end_ns is None:
            end_ns = self.last_rx_ns + 1 if self.last_rx_ns is not None else None

        windows = []
        if self.origin_ns is not None and end_ns is not None and end_ns > self.origin_ns:
            count = math.ceil((end_ns - self.origin_ns) / self.window_ns)
            # frame drops are attributed to the window of the first fragment
            drops_by_index: dict[int, int] = {}
            if self.frame_deadline_ns is not None:
                for frame in self._frames.values():
                    if self._frame_is_dropped(frame):
                        idx = (frame.first_rx_ns - self.origin_ns) // self.window_ns
                        drops_by_index[idx] = drops_by_index.get(idx, 0) + 1
            for index in range(count):
                win = self._windows.get(index, _Window())
                windows.append(
                    {
                        "start_ns": self.origin_ns + index * self.window_ns,
                        "rx_bytes": win.rx_bytes,
                        "rx_packets": win.rx_packets,
                        "throughput_bps": win.rx_bytes * 8 / self.window_s,
                        "rtt_count": win.rtt_count,
                        "rtt_mean_ns": (
                            win.rtt_sum_ns / win.rtt_count if win.rtt_count else None
                        ),
                        "frame_drops": drops_by_index.get(index, 0),
                    }
                )

        received = self.rx_packets
        if self.max_seq_seen is not None:
            expected = self.max_seq_seen + 1
            loss_ratio = (expected - received) / expected
        else:
            loss_ratio = None

        rtt_sorted = sorted(self.rtt_samples_ns)
        rtt = {
            "count": len(rtt_sorted),
            "mean_ns": (sum(rtt_sorted) / len(rtt_sorted)) if rtt_sorted else None,
            "p50_ns": percentile(rtt_sorted, 50) if rtt_sorted else None,
            "p95_ns": percentile(rtt_sorted, 95) if rtt_sorted else None,
            "max_ns": float(rtt_sorted[-1]) if rtt_sorted else None,
        }

        frames = None
        if self.frame_deadline_ns is not None:
            frames = {
                "deadline_ms": self.frame_deadline_ns / 1_000_000,
                "observed": len(self._frames),
                "dropped": self.frame_drops(),
                "min_frame_id": min(self._frames) if self._frames else None,
                "max_frame_id": max(self._frames) if self._frames else None,
            }

        return {
            "flow_id": self.flow_id,
            "window_s": self.window_s,
            "origin_ns": self.origin_ns,
            "end_ns": end_ns,
            "rx_packets": self.rx_packets,
            "rx_bytes": self.rx_bytes,
            "duplicates": self.duplicate_count,
            "max_seq_seen": self.max_seq_seen,
            "loss_ratio": loss_ratio,
            "jitter_ns": self.jitter_ns,
            "rtt": rtt,
            "rtt_samples_ns": list(self.rtt_samples_ns),
            "frames": frames,
            "windows": windows,
        }


def merge_reports(
    flow: dict,
    sender: dict | None,
    receiver: dict | None,
    duration_ns: int | None = None,
) -> dict:
    """Combine the two endpoint views of one flow into its canonical report.

    ``flow`` is the FlowSpec JSON; ``sender`` is the sending endpoint's
    partial report (tx counters plus the metrics accumulated from echo
    replies); ``receiver`` is the receiving endpoint's partial report.
    Delivery statistics come from the receiver, RTT from the sender.
    """
    rx_metrics = receiver["metrics"] if receiver else None
    tx_metrics = sender["metrics"] if sender else None

    report = {
        "device_id": (sender or receiver or {}).get("device_id"),
        "flow_id": flow["flow_id"],
        "kind": flow["kind"],
        "direction": flow["direction"],
        "offered_bps": flow.get("offered_bps"),
        "tx": {
            "packets": sender["tx_packets"] if sender else None,
            "bytes": sender["tx_bytes"] if sender else None,
        },
        "rx": None,
        "rtt": None,
        "jitter_ns": rx_metrics["jitter_ns"] if rx_metrics else None,
    }

    if rx_metrics is not None:
        if duration_ns is None and rx_metrics["origin_ns"] is not None:
            duration_ns = rx_metrics["end_ns"] - rx_metrics["origin_ns"]
        mean_bps = (
            rx_metrics["rx_bytes"] * 8 * NS_PER_S / duration_ns
            if duration_ns
            else None
        )
        report["rx"] = {
            "packets": rx_metrics["rx_packets"],
            "bytes": rx_metrics["rx_bytes"],
            "duplicates": rx_metrics["duplicates"],
            "max_seq_seen": rx_metrics["max_seq_seen"],
            "loss_ratio": rx_metrics["loss_ratio"],
            "throughput_bps_mean": mean_bps,
            "windows": rx_metrics["windows"],
            "frames": rx_metrics["frames"],
        }

    if tx_metrics is not None:
        report["rtt"] = {
            **tx_metrics["rtt"],
            "samples_ns": tx_metrics["rtt_samples_ns"],
            "windows": [
                {
                    "start_ns": w["start_ns"],
                    "rtt_count": w["rtt_count"],
                    "rtt_mean_ns": w["rtt_mean_ns"],
                }
                for w in tx_metrics["windows"]
            ],
        }

    return report
