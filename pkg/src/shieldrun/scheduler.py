"""Cooperative M:N green threads multiplexed onto a fixed number of TCS slots.

Application threads are greenlets.  The scheduler loop runs in the greenlet
that called :meth:`Scheduler.run` and hands each round at most ``tcs_count``
runnable threads.  All timing is virtual: the shared :class:`VirtualClock`
only advances when work is charged or when the scheduler idles towards the
next timer deadline.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable

import greenlet

from .errors import Deadlock, ShieldRunError

log = logging.getLogger(__name__)

SPIN_INSIDE = "spin_inside"
EXIT_OUTSIDE = "exit_outside"

_current_sched: Scheduler | None = None


class VirtualClock:
    """Monotonic virtual time in abstract cost units."""

    def __init__(self) -> None:
        self.now = 0

    def advance(self, units: int) -> None:
        if units < 0:
            raise ValueError("clock cannot go backwards")
        self.now += int(units)

    def advance_to(self, deadline: int) -> None:
        if deadline > self.now:
            self.now = int(deadline)


class ThreadState(enum.Enum):
    RUNNABLE = "runnable"
    RUNNING = "running"
    BLOCKED = "blocked"
    FINISHED = "finished"


@dataclass(eq=False)
class AppThread:
    tid: int
    name: str
    entry: Callable[..., Any]
    args: tuple
    state: ThreadState = ThreadState.RUNNABLE
    wait_reason: Hashable | None = None
    wait_kind: str | None = None
    blocked_at: int = 0
    result: Any = None
    glet: greenlet.greenlet | None = None
    resume_value: Any = None
    resume_error: BaseException | None = None


@dataclass
class IdleStats:
    """In-enclave wait accounting (never crosses the syscall bridge)."""

    futex_time: int = 0
    futex_calls: int = 0
    spinlock_time: int = 0
    spinlock_calls: int = 0
    yield_time: int = 0
    yield_calls: int = 0
    sleep_time: int = 0
    sleep_calls: int = 0


@dataclass(order=True)
class _Timer:
    deadline: int
    seq: int
    callback: Callable[[], None] = field(compare=False)


class Scheduler:
    def __init__(
        self,
        tcs_count: int = 4,
        clock: VirtualClock | None = None,
        cost_per_transition: int = 5000,
        on_exit_outside: Callable[[], None] | None = None,
    ) -> None:
        if tcs_count < 1:
            raise ValueError("tcs_count must be >= 1")
        self.tcs_count = tcs_count
        self.clock = clock or VirtualClock()
        self.cost_per_transition = cost_per_transition
        # charged by the owner (enclave) when the idle loop leaves the enclave
        self.on_exit_outside = on_exit_outside
        self.stats = IdleStats()
        self.threads: dict[int, AppThread] = {}
        self.max_running = 0
        self._tids = itertools.count(1)
        self._timer_seq = itertools.count()
        self._run_queue: deque[AppThread] = deque()
        self._wait_queues: dict[Hashable, deque[AppThread]] = {}
        self._tokens: set[Hashable] = set()
        self._timers: list[_Timer] = []
        self._mailbox: queue.SimpleQueue = queue.SimpleQueue()
        self._loop_glet: greenlet.greenlet | None = None
        self._owner = threading.get_ident()
        self._current: AppThread | None = None
        # outstanding wakes promised by other OS threads
        self.external_pending = 0

    # -- thread management -------------------------------------------------

    def spawn(self, entry: Callable[..., Any], *args: Any, name: str | None = None) -> int:
        tid = next(self._tids)
        t = AppThread(tid, name or f"t{tid}", entry, args)
        self.threads[tid] = t
        self._run_queue.append(t)
        return tid

    def state(self, tid: int) -> ThreadState:
        return self.threads[tid].state

    def result(self, tid: int) -> Any:
        return self.threads[tid].result

    def current_thread(self) -> AppThread | None:
        return self._current

    def in_green_thread(self) -> bool:
        return self._current is not None and greenlet.getcurrent() is self._current.glet

    def running_count(self) -> int:
        return sum(1 for t in self.threads.values() if t.state is ThreadState.RUNNING)

    # -- green-thread API --------------------------------------------------

    def _switch_out(self, command: str) -> Any:
        t = self._current
        assert t is not None and greenlet.getcurrent() is t.glet, "not in a green thread"
        self._loop_glet.switch(command)
        err, t.resume_error = t.resume_error, None
        value, t.resume_value = t.resume_value, None
        if err is not None:
            raise err
        return value

    def yield_now(self) -> None:
        self._switch_out("yield")

    def block_on(self, reason: Hashable, kind: str = "lock") -> Any:
        """Park the calling thread until ``wake(reason)``.

        A wake that arrived before the block left a sticky token; the call
        then consumes it and returns immediately.  Callers waiting on a
        condition must re-check it in a loop.
        """
        if reason in self._tokens:
            self._tokens.discard(reason)
            return None
        t = self._current
        t.state = ThreadState.BLOCKED
        t.wait_reason = reason
        t.wait_kind = kind
        t.blocked_at = self.clock.now
        self._wait_queues.setdefault(reason, deque()).append(t)
        return self._switch_out("block")

    def sleep(self, units: int) -> None:
        key = ("sleep", self._current.tid, next(self._timer_seq))
        self.call_at(self.clock.now + max(0, int(units)), lambda: self.wake(key))
        self.block_on(key, kind="sleep")

    def join(self, tid: int) -> Any:
        target = self.threads[tid]
        while target.state is not ThreadState.FINISHED:
            self.block_on(("join", tid), kind="join")
        return target.result

    def wake(self, reason: Hashable, all: bool = False, value: Any = None,
             error: BaseException | None = None) -> int:
        """Move the FIFO head (or every waiter) of ``reason`` to runnable.

        Safe to call from other OS threads: the wake is posted to a mailbox
        and applied by the scheduler loop.  Returns the number of threads
        woken synchronously.
        """
        if threading.get_ident() != self._owner:
            self._mailbox.put((reason, all, value, error))
            return 0
        q = self._wait_queues.get(reason)
        if not q:
            self._tokens.add(reason)
            return 0
        woken = 0
        while q:
            t = q.popleft()
            self._make_runnable(t, value, error)
            woken += 1
            if not all:
                break
        if not q:
            del self._wait_queues[reason]
        return woken

    def _make_runnable(self, t: AppThread, value: Any, error: BaseException | None) -> None:
        waited = self.clock.now - t.blocked_at
        if t.wait_kind == "lock":
            self.stats.futex_time += waited
            self.stats.futex_calls += 1
        elif t.wait_kind == "spin":
            self.stats.spinlock_time += waited
            self.stats.spinlock_calls += 1
        elif t.wait_kind == "sleep":
            self.stats.sleep_time += waited
            self.stats.sleep_calls += 1
        t.state = ThreadState.RUNNABLE
        t.wait_reason = None
        t.wait_kind = None
        t.resume_value = value
        t.resume_error = error
        self._run_queue.append(t)

    def waiting_on(self, reason: Hashable) -> int:
        return len(self._wait_queues.get(reason, ()))

    def call_at(self, deadline: int, callback: Callable[[], None]) -> None:
        heapq.heappush(self._timers, _Timer(int(deadline), next(self._timer_seq), callback))

    # -- idle policy -------------------------------------------------------

    def idle_policy(self, expected_wait: int) -> str:
        # ties leave the enclave: waiting exactly one transition pair is no cheaper inside
        if expected_wait < 2 * self.cost_per_transition:
            return SPIN_INSIDE
        return EXIT_OUTSIDE

    def _idle_until(self, deadline: int) -> None:
        wait = max(0, deadline - self.clock.now)
        if self.idle_policy(wait) == SPIN_INSIDE:
            self.stats.yield_time += wait
            self.stats.yield_calls += 1
            self.clock.advance_to(deadline)
        else:
            self.stats.sleep_time += wait
            self.stats.sleep_calls += 1
            self.clock.advance_to(deadline)
            if self.on_exit_outside is not None:
                self.on_exit_outside()

    # -- main loop ---------------------------------------------------------

    def _drain_mailbox(self) -> None:
        while True:
            try:
                reason, all_, value, error = self._mailbox.get_nowait()
            except queue.Empty:
                return
            self.wake(reason, all=all_, value=value, error=error)

    def _fire_due_timers(self) -> None:
        while self._timers and self._timers[0].deadline <= self.clock.now:
            heapq.heappop(self._timers).callback()

    def _blocked(self) -> list[AppThread]:
        return [t for t in self.threads.values() if t.state is ThreadState.BLOCKED]

    def _finish(self, t: AppThread, result: Any) -> None:
        t.state = ThreadState.FINISHED
        t.result = result
        self.wake(("join", t.tid), all=True)
        # finished threads need no pending join token
        self._tokens.discard(("join", t.tid))

    def _step(self, t: AppThread) -> None:
        if t.glet is None:
            def body(t=t):
                return t.entry(*t.args)
            t.glet = greenlet.greenlet(body, parent=self._loop_glet)
        self._current = t
        try:
            out = t.glet.switch()
        finally:
            self._current = None
        if t.glet.dead:
            self._finish(t, out)
        elif out == "yield":
            t.state = ThreadState.RUNNABLE
            self._run_queue.append(t)
        elif out != "block":
            raise ShieldRunError(f"unexpected switch value {out!r} from {t.name}")

    def run(self) -> None:
        """Run until every thread finished.  Raises the first thread error."""
        global _current_sched
        if self._loop_glet is not None:
            raise ShieldRunError("scheduler loop is not re-entrant")
        self._owner = threading.get_ident()
        self._loop_glet = greenlet.getcurrent()
        prev, _current_sched = _current_sched, self
        try:
            while True:
                self._drain_mailbox()
                self._fire_due_timers()
                if self._run_queue:
                    n = min(self.tcs_count, len(self._run_queue))
                    batch = [self._run_queue.popleft() for _ in range(n)]
                    for t in batch:
                        t.state = ThreadState.RUNNING
                    self.max_running = max(self.max_running, self.running_count())
                    for t in batch:
                        self._step(t)
                    continue
                if self._timers:
                    self._idle_until(self._timers[0].deadline)
                    continue
                blocked = self._blocked()
                if not blocked:
                    return
                if self.external_pending <= 0:
                    raise Deadlock(
                        "all threads blocked: "
                        + ", ".join(f"{t.name}@{t.wait_reason!r}" for t in blocked)
                    )
                # a wake is promised by another OS thread
                try:
                    item = self._mailbox.get(timeout=30.0)
                except queue.Empty:
                    raise Deadlock(
                        "all threads blocked: "
                        + ", ".join(f"{t.name}@{t.wait_reason!r}" for t in blocked)
                    ) from None
                self.wake(item[0], all=item[1], value=item[2], error=item[3])
        finally:
            _current_sched = prev
            for t in self.threads.values():
                if t.glet is not None and not t.glet.dead and t.state is not ThreadState.FINISHED:
                    # unwind abandoned greenlets so their finally blocks run here
                    try:
                        t.glet.throw(greenlet.GreenletExit)
                    except Exception:  # noqa: BLE001
                        log.debug("error unwinding %s", t.name, exc_info=True)
            self._loop_glet = None


def current() -> Scheduler | None:
    """The scheduler whose loop is active in this OS thread, if any."""
    return _current_sched


def in_green_thread() -> bool:
    s = _current_sched
    return s is not None and s.in_green_thread()


class Mutex:
    """Futex-style lock: uncontended acquire never blocks, waiters park FIFO."""

    def __init__(self, sched: Scheduler) -> None:
        self.sched = sched
        self.owner: int | None = None
        self._key = ("mutex", id(self))

    def acquire(self) -> None:
        me = self.sched.current_thread().tid
        while self.owner is not None:
            self.sched.block_on(self._key)
        self.owner = me

    def release(self) -> None:
        self.owner = None
        self.sched.wake(self._key)

    def __enter__(self) -> Mutex:
        self.acquire()
        return self

    def __exit__(self, *exc: object) -> None:
        self.release()


SPIN_QUANTUM = 10


class SpinLock:
    """Spins with yields inside the enclave; wait time lands in the spinlock class."""

    def __init__(self, sched: Scheduler) -> None:
        self.sched = sched
        self.held = False

    def acquire(self) -> None:
        if not self.held:
            self.held = True
            return
        start = self.sched.clock.now
        while self.held:
            # spinning burns time; without this a timer-held lock never frees
            self.sched.clock.advance(SPIN_QUANTUM)
            self.sched.yield_now()
        self.sched.stats.spinlock_time += self.sched.clock.now - start
        self.sched.stats.spinlock_calls += 1
        self.held = True

    def release(self) -> None:
        self.held = False
