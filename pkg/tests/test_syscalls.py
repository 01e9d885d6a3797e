import os

import pytest

from shieldrun.errors import IagoViolation, QueueFull, ShieldError, ShieldRunError
from shieldrun.scheduler import Scheduler
from shieldrun.syscalls import (
    O_RDWR, O_READ, O_WRITE, HostIO, HostOS, SyscallBridge, SyscallClass, SyscallCosts, SyscallRequest,
    SyscallResponse, status_range,
)


class LyingHost(HostOS):
    """Returns whatever ``forge`` makes of the honest response."""

    def __init__(self, forge):
        super().__init__()
        self.forge = forge

    def execute(self, req):
        return self.forge(req, super().execute(req))


def _file(tmp_path, data=b"hello world"):
    p = tmp_path / "f.bin"
    p.write_bytes(data)
    return str(p)


def test_costs():
    c = SyscallCosts(base=200, per_kib=20)
    req = SyscallRequest(1, SyscallClass.READ, (3, 0, 4096), 4096)
    assert c.of(req) == 200 + 20 * 4


def test_read_roundtrip_outside_scheduler(tmp_path):
    br = SyscallBridge()
    io = HostIO(br)
    fd = io.open(_file(tmp_path), O_READ)
    assert io.pread(fd, 6, 100) == b"world"
    io.close(fd)
    assert br.counts["read"].calls >= 1
    br.close()


def test_write_rename_inside_green_threads(tmp_path):
    s = Scheduler()
    br = SyscallBridge(scheduler=s)
    io = HostIO(br)
    src, dst = str(tmp_path / "a"), str(tmp_path / "b")
    out = {}

    def main():
        fd = io.open(src, O_WRITE)
        io.pwrite(fd, 0, b"x" * 5000)
        io.close(fd)
        io.rename(src, dst)
        fd = io.open(dst, O_RDWR)
        out["data"] = io.pread(fd, 0, 10_000)
        io.close(fd)

    s.spawn(main)
    s.run()
    br.close()
    assert out["data"] == b"x" * 5000
    assert not os.path.exists(src)
    assert s.clock.now > 0


def test_status_ranges():
    assert status_range(SyscallRequest(1, SyscallClass.READ, (3, 0, 10), 10))[1] == 10
    lo, hi = status_range(SyscallRequest(1, SyscallClass.CLOSE, (3,)))
    assert lo < 0 <= hi


@pytest.mark.parametrize("forge,why", [
    (lambda req, r: SyscallResponse(r.id, r.status, r.payload + b"!" * 100), "capacity"),
    (lambda req, r: SyscallResponse(r.id, 10**9, r.payload), "status"),
    (lambda req, r: SyscallResponse(r.id, r.status + 1, r.payload), "length"),
    (lambda req, r: SyscallResponse(r.id + 1000, r.status, r.payload), "id"),
])
def test_iago_rejections_outside(tmp_path, forge, why):
    path = _file(tmp_path)
    fd = os.open(path, os.O_RDONLY)
    br = SyscallBridge(LyingHost(lambda req, r: forge(req, r) if req.cls is SyscallClass.READ else r))
    try:
        with pytest.raises(ShieldError):
            br.call(SyscallClass.READ, fd, 0, 5, capacity=5)
        assert br.iago_violations == 1
    finally:
        os.close(fd)
        br.close()


def test_iago_rejection_in_green_thread(tmp_path):
    path = _file(tmp_path)
    fd = os.open(path, os.O_RDONLY)
    s = Scheduler()
    br = SyscallBridge(LyingHost(lambda req, r: SyscallResponse(r.id, r.status, b"z" * 50)), scheduler=s)
    caught = []

    def main():
        try:
            br.call(SyscallClass.READ, fd, 0, 5, capacity=5)
        except ShieldError as exc:
            caught.append(exc)

    s.spawn(main)
    s.run()
    os.close(fd)
    br.close()
    assert len(caught) == 1


def test_complete_unknown_id():
    br = SyscallBridge()
    with pytest.raises(IagoViolation):
        br.complete(SyscallResponse(999, 0, b""))


def test_queue_full_and_depth():
    br = SyscallBridge(depth=2)
    t1 = br.submit(br.new_request(SyscallClass.SCHED_YIELD))
    t2 = br.submit(br.new_request(SyscallClass.SCHED_YIELD))
    with pytest.raises(QueueFull):
        br.submit(br.new_request(SyscallClass.SCHED_YIELD))
    br.wait(t1)
    br.wait(t2)
    assert br.outstanding == 0
    br.close()


def test_request_validation():
    br = SyscallBridge()
    with pytest.raises(ShieldRunError):
        br.submit(br.new_request(SyscallClass.CLOSE, 1, 2))
    with pytest.raises(ShieldRunError):
        br.submit(br.new_request(SyscallClass.CLOSE, 1, capacity=8))
    br.close()


def test_synchronous_fallback_counts_transitions(tmp_path):
    crossings = []
    br = SyscallBridge(synchronous=True, on_sync_transition=lambda: crossings.append(1))
    io = HostIO(br)
    fd = io.open(_file(tmp_path))
    io.pread(fd, 0, 4)
    io.close(fd)
    assert len(crossings) == 3


def test_many_threads_share_bounded_queue(tmp_path):
    path = _file(tmp_path, bytes(range(256)) * 16)
    s = Scheduler(tcs_count=4)
    br = SyscallBridge(scheduler=s, depth=3)
    io = HostIO(br)
    fd = io.open(path)
    results = {}

    def reader(i):
        results[i] = io.pread(fd, i * 100, 100)

    for i in range(20):
        s.spawn(reader, i)
    s.run()
    br.close()
    raw = bytes(range(256)) * 16
    assert all(results[i] == raw[i * 100:i * 100 + 100] for i in range(20))


def test_profile_shape(tmp_path):
    br = SyscallBridge()
    io = HostIO(br)
    fd = io.open(_file(tmp_path))
    io.pread(fd, 0, 4)
    prof = br.profile()
    assert prof.row("futex").bridge_calls == 0
    assert prof.to_csv().splitlines()[0] == "class,time_units,percent"
    assert abs(sum(r.percent for r in prof.rows) - 100.0) < 1e-9
    times = [r.time_units for r in prof.rows]
    assert times == sorted(times, reverse=True)
    br.close()
