"""Virtual-time asyncio event loop and clock facades.

The controller, agents and the emulated channel are all written against
asyncio.  Running them on :class:`VirtualTimeLoop` executes the exact same
code in virtual time: whenever no callback is ready, the clock jumps straight
to the next scheduled timer, so a five-minute test procedure finishes in
however long the packet events take to process.  On a standard loop the same
code runs at wall-clock pace.

Virtual runs must be pure computation: no sockets, threads or executors, or
the loop would stall waiting for I/O that virtual time cannot reach.
"""

from __future__ import annotations

import asyncio
import selectors
import time

NS_PER_S = 1_000_000_000


class StalledVirtualLoop(RuntimeError):
    """The virtual loop ran out of events while work was still pending."""


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    """Event loop whose clock jumps to the next timer instead of sleeping."""

    def __init__(self):
        super().__init__(selectors.SelectSelector())
        self._virtual_now = 0.0

    def time(self) -> float:
        return self._virtual_now

    def _run_once(self):
        if not self._ready:
            if self._scheduled:
                # cancelled handles may sit on top of the heap; their
                # deadline is still a lower bound for every live timer, so
                # jumping there never skips an event
                when = self._scheduled[0]._when
                if when > self._virtual_now:
                    self._virtual_now = when
            elif not self._stopping:
                raise StalledVirtualLoop(
                    "no ready callbacks and no scheduled timers; "
                    "a task is awaiting an event that can never arrive"
                )
        super()._run_once()


def _cancel_all_tasks(loop) -> None:
    pending = asyncio.all_tasks(loop)
    if not pending:
        return
    for task in pending:
        task.cancel()
    loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))


def run_virtual(coro):
    """Run ``coro`` to completion on a fresh virtual-time loop."""
    loop = VirtualTimeLoop()
    try:
        return loop.run_until_complete(coro)
    finally:
        try:
            _cancel_all_tasks(loop)
            loop.run_until_complete(loop.shutdown_asyncgens())
        finally:
            asyncio.set_event_loop(None)
            loop.close()


class Clock:
    """Nanosecond clock bound to the running event loop.

    On a virtual loop, ``now_ns`` is the virtual time (starting at 0); on a
    real loop it is wall time (Unix epoch).  ``sleep_until_ns`` parks the
    caller until the given instant on the same basis.
    """

    def __init__(self, loop: asyncio.AbstractEventLoop):
        self._loop = loop
        self._virtual = isinstance(loop, VirtualTimeLoop)
        # maps wall ns to loop-time seconds on real loops
        self._offset_s = 0.0 if self._virtual else time.time() - loop.time()

    @classmethod
    def running(cls) -> "Clock":
        return cls(asyncio.get_running_loop())

    @property
    def is_virtual(self) -> bool:
        return self._virtual

    def now_ns(self) -> int:
        if self._virtual:
            return round(self._loop.time() * NS_PER_S)
        return time.time_ns()

    def _loop_when(self, t_ns: int) -> float:
        return t_ns / NS_PER_S - self._offset_s

    async def sleep_until_ns(self, t_ns: int) -> None:
        if t_ns <= self.now_ns():
            return
        future = self._loop.create_future()
        handle = self._loop.call_at(self._loop_when(t_ns), future.set_result, None)
        try:
            await future
        finally:
            handle.cancel()

    async def sleep(self, seconds: float) -> None:
        await asyncio.sleep(seconds)

    def call_at_ns(self, t_ns: int, callback, *args) -> asyncio.TimerHandle:
        return self._loop.call_at(self._loop_when(t_ns), callback, *args)
