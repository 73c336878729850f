import asyncio
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sting.transport import EmulatedChannel, FifoChannelModel, UnknownEndpoint
from sting.vtime import run_virtual

US = 1_000
MS = 1_000_000
S = 1_000_000_000


def test_single_packet_service_time():
    model = FifoChannelModel(capacity_bps=100e6, propagation_ns=0)
    assert model.transmit("a", "b", bytes(1250), now_ns=0)
    # 1250 B * 8 / 1e8 bit/s = 100 us
    deliveries = model.advance(100 * US)
    assert len(deliveries) == 1
    assert deliveries[0].time_ns == 100 * US


def test_propagation_adds_to_delivery():
    model = FifoChannelModel(capacity_bps=100e6, propagation_ns=50 * US)
    model.transmit("a", "b", bytes(1250), now_ns=0)
    assert model.advance(149 * US) == []
    assert model.advance(150 * US)[0].time_ns == 150 * US


def test_tail_drop_when_buffer_full():
    model = FifoChannelModel(capacity_bps=1e6, buffer_bytes=3000)
    assert model.transmit("a", "b", bytes(1500), now_ns=0)
    assert model.transmit("a", "b", bytes(1500), now_ns=0)
    assert not model.transmit("a", "b", bytes(1500), now_ns=0)
    assert model.stats.dropped_packets == 1
    assert model.stats.offered_packets == 3


def test_buffer_frees_as_service_completes():
    model = FifoChannelModel(capacity_bps=8e6, buffer_bytes=2000)  # 1 ms per 1000 B
    assert model.transmit("a", "b", bytes(1000), now_ns=0)
    assert model.transmit("a", "b", bytes(1000), now_ns=0)
    assert not model.transmit("a", "b", bytes(1000), now_ns=0)
    # after the first service completes there is room again
    assert model.transmit("a", "b", bytes(1000), now_ns=1 * MS)
    assert model.stats.dropped_packets == 1


def test_fifo_order_stable_for_equal_enqueue_times():
    model = FifoChannelModel(capacity_bps=1e9)
    for i in range(5):
        model.transmit("a", "b", bytes([i]) + bytes(99), now_ns=0)
    deliveries = model.advance(S)
    assert [d.data[0] for d in deliveries] == [0, 1, 2, 3, 4]
    times = [d.time_ns for d in deliveries]
    assert times == sorted(times)


def test_work_conservation():
    model = FifoChannelModel(capacity_bps=8e6)
    model.transmit("a", "b", bytes(1000), now_ns=0)
    model.transmit("a", "b", bytes(1000), now_ns=0)
    assert model.is_busy(500_000)
    assert model.queued_bytes > 0
    model.advance(2 * MS)
    assert not model.is_busy(2 * MS + 1)
    assert model.queued_bytes == 0


def test_no_loss_below_capacity():
    model = FifoChannelModel(capacity_bps=10e6, buffer_bytes=100_000)
    rng = random.Random(1)
    t = 0
    for _ in range(2000):
        t += rng.randint(900 * US, 1100 * US)  # ~8 Mbit/s of 1000 B packets
        assert model.transmit("a", "b", bytes(1000), now_ns=t)
    deliveries = model.advance(t + S)
    assert model.stats.dropped_packets == 0
    assert len(deliveries) == 2000
    # queueing delay stays bounded by a few service times
    delays = [d.time_ns for d in deliveries]
    assert max(b - a for a, b in zip(delays, delays[1:])) < 10 * MS


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 60))
def test_delivery_times_non_decreasing(seed, n_packets):
    rng = random.Random(seed)
    model = FifoChannelModel(
        capacity_bps=rng.choice([1e6, 10e6, 100e6]),
        propagation_ns=rng.choice([0, 100 * US]),
        buffer_bytes=rng.choice([5_000, 50_000]),
    )
    t = 0
    for _ in range(n_packets):
        t += rng.randint(0, 2 * MS)
        model.transmit("a", "b", bytes(rng.randint(48, 1500)), now_ns=t)
    deliveries = model.advance(t + 10 * S)
    times = [d.time_ns for d in deliveries]
    assert times == sorted(times)
    assert model.stats.delivered_packets + model.stats.dropped_packets == n_packets


def test_goodput_capped_by_capacity_and_fair_between_flows():
    # two senders offering 60 Mbit/s each into a 100 Mbit/s channel for 10 s
    model = FifoChannelModel(capacity_bps=100e6, buffer_bytes=262_144)
    rng_a = random.Random(11)
    rng_b = random.Random(22)
    size = 1250
    mean_iat = size * 8 / 60e6  # seconds
    arrivals = []
    for name, rng in (("a", rng_a), ("b", rng_b)):
        t = 0.0
        while t < 10.0:
            t += rng.expovariate(1.0 / mean_iat)
            arrivals.append((round(t * S), name))
    arrivals.sort()
    sent = {"a": 0, "b": 0}
    for t_ns, name in arrivals:
        if model.transmit(name, "sink", bytes(size), now_ns=t_ns):
            pass
        sent[name] += 1
    deliveries = model.advance(20 * S)
    delivered = {"a": 0, "b": 0}
    for d in deliveries:
        delivered[d.src] += len(d.data)
    total_bits = 8 * sum(delivered.values())
    assert total_bits / 10.0 <= 100e6 * 1.01
    ratio_a = delivered["a"] / (sent["a"] * size)
    ratio_b = delivered["b"] / (sent["b"] * size)
    assert abs(ratio_a - ratio_b) / max(ratio_a, ratio_b) < 0.05


def test_monotone_degradation_with_interferer_count():
    # fixed probe flow + N constant interferers: delivered fraction of the
    # probe never rises, its mean delay never falls
    def run(n_interferers):
        model = FifoChannelModel(capacity_bps=10e6, buffer_bytes=50_000)
        size = 1000
        events = []
        for k in range(2000):  # probe: 4 Mbit/s
            events.append((k * 2 * MS, "probe"))
        for i in range(n_interferers):
            for k in range(1334):  # each interferer: ~3 Mbit/s
                events.append((k * 3 * MS + (i + 1) * 211 * US, f"i{i}"))
        events.sort()
        stop = 4 * S
        for t_ns, src in events:
            if t_ns < stop:
                model.transmit(src, "sink", bytes(size), now_ns=t_ns)
        deliveries = model.advance(stop + 10 * S)
        probe_bytes = sum(len(d.data) for d in deliveries if d.src == "probe")
        probe_delays = [
            d.time_ns - t
            for d, t in zip(
                [d for d in deliveries if d.src == "probe"],
                [t for t, s in events if s == "probe"],
            )
        ]
        mean_delay = sum(probe_delays) / len(probe_delays)
        return probe_bytes, mean_delay

    results = [run(n) for n in (0, 1, 2, 4, 6)]
    goodputs = [r[0] for r in results]
    delays = [r[1] for r in results]
    assert all(b <= a for a, b in zip(goodputs, goodputs[1:]))
    assert all(b >= a for a, b in zip(delays, delays[1:]))


def test_emulated_channel_unknown_endpoint():
    async def main():
        channel = EmulatedChannel(capacity_bps=1e6)
        endpoint = channel.attach("a")
        with pytest.raises(UnknownEndpoint):
            endpoint.send("nobody", b"x" * 48)

    run_virtual(main())


def test_emulated_channel_delivers_with_timestamps():
    async def main():
        channel = EmulatedChannel(capacity_bps=100e6, propagation_ns=0)
        a = channel.attach("a")
        b = channel.attach("b")
        got = []
        b.set_receiver(lambda src, data, rx_ns: got.append((src, len(data), rx_ns)))
        a.send("b", bytes(1250))
        await asyncio.sleep(1)
        return got

    got = run_virtual(main())
    assert got == [("a", 1250, 100 * US)]


def test_emulated_channel_duplicate_attach_rejected():
    async def main():
        channel = EmulatedChannel(capacity_bps=1e6)
        channel.attach("a")
        with pytest.raises(ValueError):
            channel.attach("a")

    run_virtual(main())
