import random

import pytest
from hypothesis import given, strategies as st

from shieldrun.errors import Deadlock
from shieldrun.scheduler import EXIT_OUTSIDE, SPIN_INSIDE, Mutex, Scheduler, SpinLock, ThreadState


def test_spawn_run_results():
    s = Scheduler(tcs_count=2)
    tids = [s.spawn(lambda i=i: i * i) for i in range(5)]
    s.run()
    assert [s.result(t) for t in tids] == [0, 1, 4, 9, 16]
    assert all(s.state(t) is ThreadState.FINISHED for t in tids)
    assert s.max_running <= 2


def test_wake_before_block_is_not_lost():
    s = Scheduler()
    log = []

    def waiter():
        s.yield_now()  # let the waker run first
        s.block_on("ev")
        log.append("woke")

    def waker():
        s.wake("ev")

    s.spawn(waiter)
    s.spawn(waker)
    s.run()
    assert log == ["woke"]


def test_wake_value_and_error():
    s = Scheduler()
    got = []

    def a():
        got.append(s.block_on("v"))
        try:
            s.block_on("e")
        except ValueError as exc:
            got.append(str(exc))

    def b():
        s.yield_now()
        s.wake("v", value=42)
        s.yield_now()
        s.wake("e", error=ValueError("boom"))

    s.spawn(a)
    s.spawn(b)
    s.run()
    assert got == [42, "boom"]


def test_deadlock_detected():
    s = Scheduler()
    s.spawn(lambda: s.block_on("never"))
    with pytest.raises(Deadlock):
        s.run()


def test_thread_error_propagates():
    s = Scheduler()

    def bad():
        raise RuntimeError("x")

    s.spawn(bad)
    with pytest.raises(RuntimeError):
        s.run()


def test_sleep_and_join():
    s = Scheduler()

    def sleeper():
        s.sleep(300)
        return s.clock.now

    def joiner(t):
        return s.join(t)

    t = s.spawn(sleeper)
    j = s.spawn(joiner, t)
    s.run()
    assert s.result(j) == 300 == s.result(t)
    assert s.stats.sleep_calls >= 1


def test_idle_policy_threshold():
    s = Scheduler(cost_per_transition=100)
    assert s.idle_policy(199) == SPIN_INSIDE
    assert s.idle_policy(200) == EXIT_OUTSIDE  # ties leave the enclave


def test_exit_outside_charges_transition():
    exits = []
    s = Scheduler(cost_per_transition=10, on_exit_outside=lambda: exits.append(1))
    s.spawn(lambda: s.sleep(5))
    s.spawn(lambda: s.sleep(1000))
    s.run()
    assert len(exits) >= 1
    assert s.stats.yield_calls >= 1


def test_mutex_contention_counts_as_futex():
    s = Scheduler()
    m = Mutex(s)
    order = []

    def worker(i):
        with m:
            order.append(i)
            s.sleep(10)

    for i in range(3):
        s.spawn(worker, i)
    s.run()
    assert order == [0, 1, 2]
    assert s.stats.futex_calls == 2
    assert s.stats.futex_time == 10 + 20


def test_spinlock_accounts_spin_class():
    s = Scheduler()
    lk = SpinLock(s)

    def worker():
        lk.acquire()
        s.sleep(50)
        lk.release()

    s.spawn(worker)
    s.spawn(worker)
    s.run()
    assert s.stats.spinlock_calls == 1
    assert 50 <= s.stats.spinlock_time <= 60
    assert s.stats.futex_time == 0


@given(st.integers(1, 4), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_random_schedules_complete(tcs, n, seed):
    """Every thread blocks on its own event once; a driver wakes them in random order."""
    rng = random.Random(seed)
    s = Scheduler(tcs_count=tcs)
    done = set()

    def worker(i):
        for _ in range(rng.randint(0, 3)):
            s.yield_now()
        s.block_on(("ev", i))
        done.add(i)

    def driver():
        order = list(range(n))
        rng.shuffle(order)
        for i in order:
            for _ in range(rng.randint(0, 2)):
                s.yield_now()
            s.wake(("ev", i))

    for i in range(n):
        s.spawn(worker, i)
    s.spawn(driver)
    s.run()
    assert done == set(range(n))
    assert s.max_running <= tcs


def test_run_not_reentrant():
    s = Scheduler()
    errors = []

    def inner():
        try:
            s.run()
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    s.spawn(inner)
    s.run()
    assert errors
