"""Brute-force reference computations for metric tests.

Everything here recomputes reports naively from a fully buffered packet
trace, independent of the streaming accumulators in ``sting.metrics``.
"""

from __future__ import annotations

import math

NS_PER_S = 1_000_000_000

ECHO_REPLY = 2


def _percentile(values, q):
    # linear interpolation between order statistics, same definition the
    # package documents
    ordered = sorted(values)
    if len(ordered) == 1:
        return float(ordered[0])
    pos = q / 100 * (len(ordered) - 1)
    below = math.floor(pos)
    above = math.ceil(pos)
    if below == above:
        return float(ordered[below])
    return ordered[below] + (ordered[above] - ordered[below]) * (pos - below)


def recompute_report(
    flow_id,
    trace,
    window_s=1.0,
    origin_ns=None,
    frame_deadline_ms=None,
    end_ns=None,
):
    """Recompute the full flow report from a buffered trace.

    ``trace`` is a list of (packet, rx_ns, wire_bytes) in arrival order.
    """
    window_ns = round(window_s * NS_PER_S)
    deadline_ns = round(frame_deadline_ms * 1_000_000) if frame_deadline_ms is not None else None

    seen = set()
    kept = []
    duplicates = 0
    for packet, rx_ns, wire_bytes in trace:
        if packet.seq in seen:
            duplicates += 1
            continue
        seen.add(packet.seq)
        kept.append((packet, rx_ns, wire_bytes))

    if origin_ns is None and kept:
        origin_ns = kept[0][1]
    last_rx = max((rx for _, rx, _ in kept), default=None)
    if end_ns is None:
        end_ns = last_rx + 1 if last_rx is not None else None

    rx_packets = len(kept)
    rx_bytes = sum(w for _, _, w in kept)
    max_seq = max((p.seq for p, _, _ in kept), default=None)

    jitter = 0.0
    prev_transit = None
    for packet, rx_ns, _ in kept:
        transit = rx_ns - packet.tx_timestamp_ns
        if prev_transit is not None:
            jitter += (abs(transit - prev_transit) - jitter) / 16
        prev_transit = transit

    rtt_samples = []
    for packet, rx_ns, _ in kept:
        if packet.packet_type == ECHO_REPLY:
            rtt_samples.append(
                (rx_ns - packet.tx_timestamp_ns) - (packet.responder_tx_ns - packet.responder_rx_ns)
            )

    frames = {}
    if deadline_ns is not None:
        for packet, rx_ns, _ in kept:
            info = frames.setdefault(
                packet.frame_id,
                {"count": packet.fragment_count, "got": set(), "first": rx_ns, "last": rx_ns},
            )
            info["got"].add(packet.fragment_index)
            info["count"] = max(info["count"], packet.fragment_count)
            info["last"] = max(info["last"], rx_ns)

    def frame_dropped(info):
        if len(info["got"]) < info["count"]:
            return True
        return info["last"] - info["first"] > deadline_ns

    dropped_total = None
    if deadline_ns is not None:
        dropped_total = sum(1 for info in frames.values() if frame_dropped(info))
        if frames:
            dropped_total += (max(frames) - min(frames) + 1) - len(frames)

    windows = []
    if origin_ns is not None and end_ns is not None and end_ns > origin_ns:
        count = math.ceil((end_ns - origin_ns) / window_ns)
        for index in range(count):
            lo = origin_ns + index * window_ns
            hi = lo + window_ns
            in_win = [(p, rx, w) for p, rx, w in kept if lo <= rx < hi]
            bucket_bytes = sum(w for _, _, w in in_win)
            rtts = [
                (rx - p.tx_timestamp_ns) - (p.responder_tx_ns - p.responder_rx_ns)
                for p, rx, _ in in_win
                if p.packet_type == ECHO_REPLY
            ]
            drops = 0
            if deadline_ns is not None:
                for info in frames.values():
                    if frame_dropped(info) and lo <= info["first"] < hi:
                        drops += 1
            windows.append(
                {
                    "start_ns": lo,
                    "rx_bytes": bucket_bytes,
                    "rx_packets": len(in_win),
                    "throughput_bps": bucket_bytes * 8 / window_s,
                    "rtt_count": len(rtts),
                    "rtt_mean_ns": sum(rtts) / len(rtts) if rtts else None,
                    "frame_drops": drops,
                }
            )

    loss = None
    if max_seq is not None:
        loss = (max_seq + 1 - rx_packets) / (max_seq + 1)

    report = {
        "flow_id": flow_id,
        "window_s": window_s,
        "origin_ns": origin_ns,
        "end_ns": end_ns,
        "rx_packets": rx_packets,
        "rx_bytes": rx_bytes,
        "duplicates": duplicates,
        "max_seq_seen": max_seq,
        "loss_ratio": loss,
        "jitter_ns": jitter,
        "rtt": {
            "count": len(rtt_samples),
            "mean_ns": sum(rtt_samples) / len(rtt_samples) if rtt_samples else None,
            "p50_ns": _percentile(rtt_samples, 50) if rtt_samples else None,
            "p95_ns": _percentile(rtt_samples, 95) if rtt_samples else None,
            "max_ns": float(max(rtt_samples)) if rtt_samples else None,
        },
        "rtt_samples_ns": list(rtt_samples),
        "frames": (
            {
                "deadline_ms": deadline_ns / 1_000_000,
                "observed": len(frames),
                "dropped": dropped_total,
                "min_frame_id": min(frames) if frames else None,
                "max_frame_id": max(frames) if frames else None,
            }
            if deadline_ns is not None
            else None
        ),
        "windows": windows,
    }
    return report
