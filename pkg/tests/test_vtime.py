import asyncio
import time

import pytest

from sting.vtime import Clock, StalledVirtualLoop, VirtualTimeLoop, run_virtual


def test_virtual_sleep_consumes_no_wall_time():
    async def main():
        clock = Clock.running()
        await asyncio.sleep(3600)
        return clock.now_ns()

    started = time.monotonic()
    now_ns = run_virtual(main())
    assert time.monotonic() - started < 2.0
    assert now_ns == 3600 * 1_000_000_000


def test_clock_sleep_until_is_exact():
    async def main():
        clock = Clock.running()
        await clock.sleep_until_ns(60_000_000_000)
        first = clock.now_ns()
        await clock.sleep_until_ns(120_000_000_000)
        return first, clock.now_ns()

    first, second = run_virtual(main())
    assert first == 60_000_000_000
    assert second == 120_000_000_000
    assert second - first == 60_000_000_000


def test_sleep_until_past_returns_immediately():
    async def main():
        clock = Clock.running()
        await asyncio.sleep(1)
        await clock.sleep_until_ns(0)
        return clock.now_ns()

    assert run_virtual(main()) == 1_000_000_000


def test_virtual_time_starts_at_zero():
    async def main():
        return Clock.running().now_ns()

    assert run_virtual(main()) == 0


def test_equal_deadline_ordering_is_deterministic():
    # asyncio's timer heap does not promise insertion order for equal
    # deadlines, but identical programs must produce identical schedules
    async def main():
        order = []
        loop = asyncio.get_running_loop()
        for tag in ("a", "b", "c", "d", "e"):
            loop.call_at(5.0, order.append, tag)
        await asyncio.sleep(10)
        return order

    first = run_virtual(main())
    second = run_virtual(main())
    assert sorted(first) == ["a", "b", "c", "d", "e"]
    assert first == second


def test_starved_loop_raises():
    async def main():
        await asyncio.get_running_loop().create_future()  # never resolved

    with pytest.raises(StalledVirtualLoop):
        run_virtual(main())


def test_real_clock_uses_wall_time():
    async def main():
        clock = Clock.running()
        assert not clock.is_virtual
        before = time.time_ns()
        now = clock.now_ns()
        after = time.time_ns()
        assert before <= now <= after
        target = clock.now_ns() + 50_000_000
        await clock.sleep_until_ns(target)
        assert clock.now_ns() >= target

    asyncio.run(main())


def test_virtual_loop_isinstance_detection():
    loop = VirtualTimeLoop()
    try:
        clock = Clock(loop)
        assert clock.is_virtual
    finally:
        loop.close()
