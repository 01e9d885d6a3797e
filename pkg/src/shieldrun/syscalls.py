"""Asynchronous syscall bridge between enclave green threads and host workers.

Enclave threads post :class:`SyscallRequest` objects into a bounded queue and
park.  Worker OS threads outside the enclave execute them against
:class:`HostOS` and post responses back.  Every response is sanity-checked
(:meth:`SyscallBridge.complete`) before any byte of it reaches enclave code.

Delivery is ordered by virtual time, not by when a worker happened to
finish: a request submitted at ``t`` is delivered at ``t + cost(request)``.
That keeps every report deterministic regardless of host thread timing.
"""

from __future__ import annotations

import enum
import itertools
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from collections import Counter
from typing import Callable

from . import scheduler as sched_mod
from .errors import IagoViolation, QueueFull, ShieldError, ShieldRunError
from .scheduler import IdleStats, Scheduler, VirtualClock

log = logging.getLogger(__name__)

DEFAULT_QUEUE_DEPTH = 64
DEFAULT_WORKERS = 2
DEFAULT_MAX_CAPACITY = 1 << 20

# open() flags understood by HostOS
O_READ = 0
O_WRITE = 1  # create + truncate
O_RDWR = 2  # create, keep contents


class SyscallClass(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    OPEN = "open"
    CLOSE = "close"
    NANOSLEEP = "nanosleep"
    SCHED_YIELD = "sched_yield"
    FREE = "munmap"
    ALLOC = "brk"
    RENAME = "rename"


# fd, offset, count / fd, offset / flags / fd / units / - / addr, len / increment / -
ARITY = {
    SyscallClass.READ: 3,
    SyscallClass.WRITE: 2,
    SyscallClass.OPEN: 1,
    SyscallClass.CLOSE: 1,
    SyscallClass.NANOSLEEP: 1,
    SyscallClass.SCHED_YIELD: 0,
    SyscallClass.FREE: 2,
    SyscallClass.ALLOC: 1,
    SyscallClass.RENAME: 0,
}

# classes whose request carries an input buffer (path, data)
_TAKES_DATA = {SyscallClass.WRITE, SyscallClass.OPEN, SyscallClass.RENAME}


@dataclass(frozen=True)
class SyscallRequest:
    id: int
    cls: SyscallClass
    args: tuple[int, ...] = ()
    out_buffer_capacity: int = 0
    data: bytes = b""


@dataclass(frozen=True)
class SyscallResponse:
    id: int
    status: int
    payload: bytes = b""


def status_range(req: SyscallRequest) -> tuple[int, int]:
    """Inclusive range of statuses a well-behaved host may return."""
    c = req.cls
    if c is SyscallClass.READ:
        return -1, req.out_buffer_capacity
    if c is SyscallClass.WRITE:
        return -1, len(req.data)
    if c is SyscallClass.OPEN:
        return -1, 2**31 - 1
    if c is SyscallClass.SCHED_YIELD:
        return 0, 0
    return -1, 0


@dataclass
class SyscallCosts:
    """Virtual service time of one bridged call: ``base + per_kib * KiB moved``."""

    base: int = 200
    per_kib: int = 20

    def of(self, req: SyscallRequest) -> int:
        moved = len(req.data) + req.out_buffer_capacity
        return self.base + self.per_kib * ((moved + 1023) // 1024)


class HostOS:
    """The untrusted side: executes requests with real host file primitives."""

    def execute(self, req: SyscallRequest) -> SyscallResponse:
        try:
            status, payload = self._dispatch(req)
        except OSError:
            status, payload = -1, b""
        return SyscallResponse(req.id, status, payload)

    def _dispatch(self, req: SyscallRequest) -> tuple[int, bytes]:
        c, a = req.cls, req.args
        if c is SyscallClass.OPEN:
            path = req.data.decode()
            flags = {
                O_READ: os.O_RDONLY,
                O_WRITE: os.O_WRONLY | os.O_CREAT | os.O_TRUNC,
                O_RDWR: os.O_RDWR | os.O_CREAT,
            }[a[0]]
            return os.open(path, flags, 0o600), b""
        if c is SyscallClass.READ:
            data = os.pread(a[0], a[2], a[1])
            return len(data), data
        if c is SyscallClass.WRITE:
            return os.pwrite(a[0], req.data, a[1]), b""
        if c is SyscallClass.CLOSE:
            os.close(a[0])
            return 0, b""
        if c is SyscallClass.RENAME:
            src, dst = req.data.decode().split("\0")
            os.replace(src, dst)
            return 0, b""
        # sleep/yield/free/alloc have no observable host effect here
        return 0, b""


@dataclass(eq=False)
class Ticket:
    request: SyscallRequest
    deadline: int
    response: SyscallResponse | None = None
    error: BaseException | None = None
    deliveries: int = 0

    @property
    def id(self) -> int:
        return self.request.id

    @property
    def done(self) -> bool:
        return self.response is not None or self.error is not None


@dataclass
class _ClassCounter:
    calls: int = 0
    time: int = 0


@dataclass
class ProfileRow:
    cls: str
    time_units: int
    calls: int
    bridge_calls: int
    bridge_time: int
    percent: float = 0.0


# classes serviced entirely inside the enclave
IN_ENCLAVE_CLASSES = ("futex", "spinlock")


@dataclass
class SyscallProfile:
    rows: list[ProfileRow] = field(default_factory=list)

    @classmethod
    def build(cls, bridge_counts: dict[str, _ClassCounter], idle: IdleStats) -> SyscallProfile:
        acc: dict[str, list[int]] = {}

        def add(name: str, t: int, calls: int, bridged: bool = False) -> None:
            row = acc.setdefault(name, [0, 0, 0, 0])
            row[0] += t
            row[1] += calls
            if bridged:
                row[2] += calls
                row[3] += t

        add("futex", idle.futex_time, idle.futex_calls)
        add("spinlock", idle.spinlock_time, idle.spinlock_calls)
        add("sched_yield", idle.yield_time, idle.yield_calls)
        add("nanosleep", idle.sleep_time, idle.sleep_calls)
        for c in SyscallClass:
            cnt = bridge_counts.get(c.value, _ClassCounter())
            add(c.value, cnt.time, cnt.calls, bridged=True)
        total = sum(r[0] for r in acc.values())
        order = {name: i for i, name in enumerate(acc)}
        rows = [
            ProfileRow(name, t, calls, bcalls, btime, 100.0 * t / total if total else 0.0)
            for name, (t, calls, bcalls, btime) in acc.items()
        ]
        rows.sort(key=lambda r: (-r.time_units, order[r.cls]))
        return cls(rows)

    def row(self, name: str) -> ProfileRow:
        for r in self.rows:
            if r.cls == name:
                return r
        raise KeyError(name)

    def share(self, name: str) -> float:
        return self.row(name).percent

    @property
    def total_time(self) -> int:
        return sum(r.time_units for r in self.rows)

    @property
    def bridge_time(self) -> int:
        return sum(r.bridge_time for r in self.rows)

    def to_csv(self) -> str:
        lines = ["class,time_units,percent"]
        lines += [f"{r.cls},{r.time_units},{r.percent:.2f}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        w = max(len(r.cls) for r in self.rows) if self.rows else 5
        out = [f"{'syscall':<{w}}  {'time':>14}  {'time (%)':>8}  {'calls':>8}"]
        for r in self.rows:
            out.append(f"{r.cls:<{w}}  {r.time_units:>14}  {r.percent:>8.2f}  {r.calls:>8}")
        return "\n".join(out)


_STOP = object()


class SyscallBridge:
    def __init__(
        self,
        host: HostOS | None = None,
        *,
        clock: VirtualClock | None = None,
        scheduler: Scheduler | None = None,
        workers: int = DEFAULT_WORKERS,
        depth: int = DEFAULT_QUEUE_DEPTH,
        max_capacity: int = DEFAULT_MAX_CAPACITY,
        costs: SyscallCosts | None = None,
        synchronous: bool = False,
        on_sync_transition: Callable[[], None] | None = None,
        on_copy_in: Callable[[int], None] | None = None,
    ) -> None:
        self.host = host or HostOS()
        self.clock = clock or (scheduler.clock if scheduler else VirtualClock())
        self.scheduler = scheduler
        self.depth = depth
        self.max_capacity = max_capacity
        self.costs = costs or SyscallCosts()
        self.synchronous = synchronous
        self.on_sync_transition = on_sync_transition
        self.on_copy_in = on_copy_in
        self.counts: dict[str, _ClassCounter] = {}
        self.iago_violations = 0
        self.queued = Counter()  # class -> requests that entered the queue
        self._ids = itertools.count(1)
        self._issued: set[int] = set()
        self._outstanding: dict[int, Ticket] = {}
        self._arrived: dict[int, SyscallResponse | BaseException] = {}
        self._requests: queue.Queue = queue.Queue()
        self._responses: queue.Queue = queue.Queue()
        self._n_workers = workers
        self._workers: list[threading.Thread] = []
        self._slot_key = ("bridge-slot", id(self))

    # -- worker side -------------------------------------------------------

    def _start_workers(self) -> None:
        for i in range(self._n_workers):
            th = threading.Thread(target=self._worker, name=f"syscall-worker-{i}", daemon=True)
            th.start()
            self._workers.append(th)

    def _worker(self) -> None:
        while True:
            req = self._requests.get()
            if req is _STOP:
                return
            try:
                resp = self.host.execute(req)
            except Exception as exc:  # noqa: BLE001 - host faults surface as shield errors
                resp = exc
            self._responses.put((req.id, resp))

    def close(self) -> None:
        for _ in self._workers:
            self._requests.put(_STOP)
        for th in self._workers:
            th.join(timeout=5)
        self._workers.clear()

    # -- enclave side ------------------------------------------------------

    def new_request(self, cls: SyscallClass, *args: int, capacity: int = 0,
                    data: bytes = b"") -> SyscallRequest:
        return SyscallRequest(next(self._ids), SyscallClass(cls), tuple(int(a) for a in args),
                              capacity, bytes(data))

    @property
    def outstanding(self) -> int:
        return len(self._outstanding)

    def _check_request(self, req: SyscallRequest) -> None:
        if req.id in self._issued:
            raise ShieldRunError(f"syscall id {req.id} reused")
        if len(req.args) != ARITY[req.cls]:
            raise ShieldRunError(f"{req.cls.value} takes {ARITY[req.cls]} args")
        if not 0 <= req.out_buffer_capacity <= self.max_capacity:
            raise ShieldRunError("out_buffer_capacity out of range")
        if req.cls is not SyscallClass.READ and req.out_buffer_capacity:
            raise ShieldRunError(f"{req.cls.value} has no output buffer")
        if req.data and req.cls not in _TAKES_DATA:
            raise ShieldRunError(f"{req.cls.value} takes no input buffer")

    def _count(self, req: SyscallRequest, cost: int) -> None:
        c = self.counts.setdefault(req.cls.value, _ClassCounter())
        c.calls += 1
        c.time += cost

    def submit(self, req: SyscallRequest) -> Ticket:
        """Queue ``req`` for the host workers.  Raises QueueFull at ``depth`` outstanding."""
        self._check_request(req)
        if len(self._outstanding) >= self.depth:
            raise QueueFull(f"{self.depth} requests outstanding")
        if not self._workers:
            self._start_workers()
        cost = self.costs.of(req)
        ticket = Ticket(req, self.clock.now + cost)
        self._issued.add(req.id)
        self._outstanding[req.id] = ticket
        self._count(req, cost)
        self.queued[req.cls.value] += 1
        self._requests.put(req)
        s = self.scheduler
        if s is not None and s.in_green_thread():
            s.call_at(ticket.deadline, lambda: self._deliver_and_wake(ticket))
        return ticket

    def _await_envelope(self, req_id: int) -> SyscallResponse | BaseException:
        while req_id not in self._arrived:
            rid, resp = self._responses.get(timeout=60)
            self._arrived[rid] = resp
        return self._arrived.pop(req_id)

    def _deliver(self, ticket: Ticket) -> None:
        if ticket.done:
            return
        resp = self._await_envelope(ticket.id)
        if isinstance(resp, BaseException):
            self._reject(ticket, f"host fault: {resp!r}")
            return
        if resp.id != ticket.id:
            # a response claiming another id is dropped; this ticket still terminates
            self._reject(ticket, f"response id {resp.id} for request {ticket.id}")
            return
        try:
            self.complete(resp)
        except IagoViolation:
            pass

    def _deliver_and_wake(self, ticket: Ticket) -> None:
        self._deliver(ticket)
        self.scheduler.wake(ticket)
        if self.scheduler.waiting_on(self._slot_key):
            self.scheduler.wake(self._slot_key)

    def _reject(self, ticket: Ticket, why: str) -> None:
        self.iago_violations += 1
        self._outstanding.pop(ticket.id, None)
        ticket.error = ShieldError(f"syscall {ticket.id} rejected: {why}")
        ticket.deliveries += 1
        log.warning("iago check failed: %s", why)

    def complete(self, resp: SyscallResponse) -> None:
        """Validate a host response and hand it to the waiting ticket.

        Raises IagoViolation for an unknown id, an oversized payload or an
        out-of-range status; the waiter then gets a ShieldError instead.
        """
        ticket = self._outstanding.get(resp.id)
        if ticket is None:
            self.iago_violations += 1
            raise IagoViolation(f"response for unknown or finished id {resp.id}")
        req = ticket.request
        lo, hi = status_range(req)
        problem = None
        if len(resp.payload) > req.out_buffer_capacity:
            problem = f"payload {len(resp.payload)} > capacity {req.out_buffer_capacity}"
        elif not lo <= resp.status <= hi:
            problem = f"status {resp.status} outside [{lo}, {hi}]"
        elif req.cls is SyscallClass.READ and resp.status >= 0 and len(resp.payload) != resp.status:
            problem = "read length does not match status"
        if problem is not None:
            self._reject(ticket, problem)
            raise IagoViolation(problem)
        del self._outstanding[resp.id]
        # copy into enclave memory; the host-side buffer is never referenced again
        payload = bytes(resp.payload)
        if payload and self.on_copy_in is not None:
            self.on_copy_in(len(payload))
        ticket.response = SyscallResponse(resp.id, resp.status, payload)
        ticket.deliveries += 1

    def wait(self, ticket: Ticket) -> SyscallResponse:
        s = self.scheduler
        if s is not None and s.in_green_thread():
            while not ticket.done:
                s.block_on(ticket, kind="syscall")
        else:
            self.clock.advance_to(ticket.deadline)
            self._deliver(ticket)
        if ticket.error is not None:
            raise ticket.error
        return ticket.response

    def _call_sync(self, req: SyscallRequest) -> SyscallResponse:
        self._check_request(req)
        self._issued.add(req.id)
        cost = self.costs.of(req)
        self._count(req, cost)
        if self.on_sync_transition is not None:
            self.on_sync_transition()
        ticket = Ticket(req, self.clock.now + cost)
        self._outstanding[req.id] = ticket
        self.clock.advance(cost)
        try:
            resp = self.host.execute(req)
        except Exception as exc:  # noqa: BLE001
            self._reject(ticket, f"host fault: {exc!r}")
            raise ticket.error from None
        try:
            self.complete(resp)
        except IagoViolation:
            raise ticket.error from None
        return ticket.response

    def call(self, cls: SyscallClass, *args: int, capacity: int = 0,
             data: bytes = b"") -> SyscallResponse:
        """Issue one syscall and wait for its validated response."""
        req = self.new_request(cls, *args, capacity=capacity, data=data)
        if self.synchronous:
            return self._call_sync(req)
        while True:
            try:
                ticket = self.submit(req)
                break
            except QueueFull:
                s = sched_mod.current()
                if s is None or not s.in_green_thread():
                    raise
                # park until a delivery frees a slot; yielding would stall virtual time
                s.block_on(self._slot_key, kind="syscall")
        return self.wait(ticket)

    def profile(self, idle: IdleStats | None = None) -> SyscallProfile:
        return SyscallProfile.build(self.counts, idle or IdleStats())


class HostIO:
    """File primitives for in-enclave code, routed through a bridge."""

    def __init__(self, bridge: SyscallBridge) -> None:
        self.bridge = bridge

    def _ok(self, resp: SyscallResponse, what: str) -> int:
        if resp.status < 0:
            raise OSError(f"{what} failed")
        return resp.status

    def open(self, path: str, flags: int = O_READ) -> int:
        return self._ok(self.bridge.call(SyscallClass.OPEN, flags, data=os.fsencode(path)),
                        f"open {path}")

    def pread(self, fd: int, offset: int, n: int) -> bytes:
        out = bytearray()
        cap = self.bridge.max_capacity
        while n > 0:
            want = min(n, cap)
            resp = self.bridge.call(SyscallClass.READ, fd, offset, want, capacity=want)
            self._ok(resp, "read")
            out += resp.payload
            if resp.status < want:
                break
            offset += want
            n -= want
        return bytes(out)

    def pwrite(self, fd: int, offset: int, data: bytes) -> None:
        view = memoryview(data)
        cap = self.bridge.max_capacity
        while view:
            chunk = bytes(view[:cap])
            written = self._ok(self.bridge.call(SyscallClass.WRITE, fd, offset, data=chunk),
                               "write")
            if written == 0:
                raise OSError("short write")
            offset += written
            view = view[written:]

    def close(self, fd: int) -> None:
        self._ok(self.bridge.call(SyscallClass.CLOSE, fd), "close")

    def rename(self, src: str, dst: str) -> None:
        self._ok(self.bridge.call(SyscallClass.RENAME, data=f"{src}\0{dst}".encode()), "rename")

    def exists(self, path: str) -> bool:
        # metadata probe; not a protected operation
        return os.path.exists(path)

    def size(self, path: str) -> int:
        return os.path.getsize(path)


class DirectIO:
    """Same surface as HostIO for code running outside any enclave (CAS, tools)."""

    def open(self, path: str, flags: int = O_READ) -> int:
        return HostOS()._dispatch(SyscallRequest(0, SyscallClass.OPEN, (flags,),
                                                 data=os.fsencode(path)))[0]

    def pread(self, fd: int, offset: int, n: int) -> bytes:
        return os.pread(fd, n, offset)

    def pwrite(self, fd: int, offset: int, data: bytes) -> None:
        os.pwrite(fd, data, offset)

    def close(self, fd: int) -> None:
        os.close(fd)

    def rename(self, src: str, dst: str) -> None:
        os.replace(src, dst)

    def exists(self, path: str) -> bool:
        return os.path.exists(path)

    def size(self, path: str) -> int:
        return os.path.getsize(path)
