"""Desk-scale experiment harness.  All times are virtual cost units."""

from __future__ import annotations

import functools
import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .enclave import MiB, PAGE_SIZE, CostModel, Enclave, EnclaveConfig, Mode, create_enclave
from .errors import EndOfData, QueueClosed
from .fsshield import FileShield, PathPolicy, ShieldMode
from .scheduler import Scheduler
from .syscalls import DirectIO, SyscallProfile
from .tensor import (
    FifoQueue,
    RecordSource,
    Session,
    build_cifar_model,
    central_crop,
    encode_records,
    graph_to_bytes,
    import_frozen,
    one_hot,
    synthetic_cifar,
)

CODE_IMAGE = b"shieldrun tensor engine bench image v1"
MODEL_FILE = "model.tscg"
TEST_FILE = "test_batch.bin"
TRAIN_FILE = "data_batch.bin"
# full-scale workload: a 330 MB working set against a 90 MB EPC
CLASSIFY_WS_OVER_EPC = 3.6
DEFAULT_TRAIN_HEAP = 1024 * MiB
DEFAULT_CLASSIFY_HEAP = 256 * MiB
BENCH_KEY = hashlib.sha256(b"shieldrun bench fs key").digest()


@dataclass
class BenchReport:
    workload: str
    mode: str
    fs_shield: bool
    items: int
    virtual_time: int
    compute: int = 0
    paging: int = 0
    transitions: int = 0
    crypto: int = 0
    page_hits: int = 0
    page_misses: int = 0
    sync_transitions: int = 0
    bridge_calls: int = 0
    threads: int = 1
    heap: int = 0
    epc: int = 0
    futex_percent: float = 0.0
    extra: dict[str, str] = field(default_factory=dict)
    latencies: list[int] = field(default_factory=list)
    profile: SyscallProfile | None = field(default=None, repr=False)

    @property
    def throughput(self) -> float:
        """Items per thousand virtual units."""
        return 1000.0 * self.items / self.virtual_time if self.virtual_time else 0.0

    def fields(self) -> dict[str, str]:
        base = {
            "workload": self.workload, "mode": self.mode, "fs_shield": "on" if self.fs_shield else "off",
            "items": str(self.items), "virtual_time": str(self.virtual_time),
            "throughput": f"{self.throughput:.6f}", "compute": str(self.compute),
            "paging": str(self.paging), "transitions": str(self.transitions), "crypto": str(self.crypto),
            "page_hits": str(self.page_hits), "page_misses": str(self.page_misses),
            "sync_transitions": str(self.sync_transitions), "bridge_calls": str(self.bridge_calls),
            "threads": str(self.threads), "heap": str(self.heap), "epc": str(self.epc),
            "futex_percent": f"{self.futex_percent:.2f}",
        }
        base.update(sorted(self.extra.items()))
        return base

    def self_check(self) -> list[str]:
        problems = []
        charged = self.compute + self.paging + self.transitions + self.crypto
        if self.virtual_time <= 0:
            problems.append("no virtual time elapsed")
        if charged > self.virtual_time:
            problems.append(f"charges {charged} exceed elapsed time {self.virtual_time}")
        if self.mode == Mode.NATIVE.value and (self.paging or self.transitions or self.crypto):
            problems.append("native run carries paging, transition or crypto cost")
        if self.mode != Mode.HARDWARE_SIM.value and (self.paging or self.transitions):
            problems.append("paging or transition cost outside hardware-sim")
        return problems


def reports_csv(reports: list[BenchReport]) -> str:
    keys: list[str] = []
    for r in reports:
        for k in r.fields():
            if k not in keys:
                keys.append(k)
    lines = [",".join(keys)]
    for r in reports:
        f = r.fields()
        lines.append(",".join(f.get(k, "") for k in keys))
    return "\n".join(lines) + "\n"


# -- shared plumbing ----------------------------------------------------------------

class WorkerPool:
    """Green worker threads parked on the futex until handed a task.

    Idle members model the runtime's inter-op thread pool.
    """

    def __init__(self, sched: Scheduler, size: int, fn: Callable[..., Any] | None = None) -> None:
        self.sched = sched
        self.fn = fn
        self.size = size
        self.tasks: list[Any] = [None] * size
        self.results: list[Any] = [None] * size
        self.pending = 0
        self.stopped = False
        self._done = ("pool-done", id(self))
        for i in range(size):
            sched.spawn(self._worker, i, name=f"pool-{i}")

    def _task_key(self, i: int) -> tuple:
        return ("pool-task", id(self), i)

    def _worker(self, i: int) -> None:
        while True:
            while self.tasks[i] is None and not self.stopped:
                self.sched.block_on(self._task_key(i))
            if self.tasks[i] is None:
                return
            args, self.tasks[i] = self.tasks[i], None
            try:
                self.results[i] = (True, self.fn(i, *args))
            except Exception as exc:  # handed back to map()
                self.results[i] = (False, exc)
            self.pending -= 1
            if self.pending == 0:
                self.sched.wake(self._done)

    def map(self, arg_list: list[tuple]) -> list[Any]:
        if len(arg_list) > self.size:
            raise ValueError("more tasks than workers")
        self.pending = len(arg_list)
        for i, args in enumerate(arg_list):
            self.results[i] = None
            self.tasks[i] = args
            self.sched.wake(self._task_key(i))
        while self.pending:
            self.sched.block_on(self._done)
        out = []
        for ok, val in self.results[:len(arg_list)]:
            if not ok:
                raise val
            out.append(val)
        return out

    def close(self) -> None:
        self.stopped = True
        for i in range(self.size):
            self.sched.wake(self._task_key(i))


def _policies(workdir: str, shielded: bool) -> tuple[PathPolicy, ...]:
    return (PathPolicy(workdir, ShieldMode.ENCRYPT_AUTH),) if shielded else ()


def _prepare_file(workdir: str, name: str, data: bytes, shielded: bool) -> str:
    """Write an input file as the data owner would, before the enclave starts."""
    path = os.path.join(workdir, name)
    fs = FileShield(DirectIO(), _policies(workdir, shielded), key=BENCH_KEY)
    fs.write_file(path, data)
    fs.close_all()
    return path


def _enclave(workdir: str, mode: Mode, fs_shield: bool, epc: int, heap: int, tcs: int,
             costs: CostModel | None) -> Enclave:
    shielded = fs_shield and mode is not Mode.NATIVE
    cfg = EnclaveConfig(heap_limit=heap, epc_limit=epc, tcs_count=tcs, mode=mode,
                        shield_policies=_policies(workdir, shielded),
                        fs_keys=BENCH_KEY if shielded else None)
    return create_enclave(CODE_IMAGE, cfg, costs=costs)


def _report(enc: Enclave, workload: str, fs_shield: bool, items: int, threads: int) -> BenchReport:
    prof = enc.profile()
    return BenchReport(
        workload=workload, mode=enc.mode.value, fs_shield=fs_shield, items=items,
        virtual_time=enc.clock.now, compute=enc.charges.compute, paging=enc.charges.paging,
        transitions=enc.charges.transitions, crypto=enc.charges.crypto,
        page_hits=enc.paging.hits, page_misses=enc.paging.misses,
        sync_transitions=enc.transitions.total, bridge_calls=sum(r.bridge_calls for r in prof.rows),
        threads=threads, heap=enc.config.heap_limit, epc=enc.config.epc_limit,
        futex_percent=prof.share("futex"), profile=prof,
    )


@functools.lru_cache(maxsize=8)
def frozen_model(seed: int) -> bytes:
    g = build_cifar_model(seed=seed)
    s = Session(g)
    s.initialize()
    return graph_to_bytes(g, s.checkpoint())


@functools.lru_cache(maxsize=8)
def dataset_bytes(n: int, seed: int) -> bytes:
    labels, images = synthetic_cifar(n, seed)
    return encode_records(labels, images)


# -- classify ---------------------------------------------------------------------

def _reader_loop(src: RecordSource, q: FifoQueue) -> None:
    try:
        while True:
            label, image = src.next()
            q.enqueue((label, central_crop(image)))
    except EndOfData:
        pass
    finally:
        q.close()


def _classify_in(enc: Enclave, model_path: str, data_path: str, images: int, pool: int,
                 out: list[np.ndarray]) -> None:
    def main() -> None:
        idle = WorkerPool(enc.scheduler, pool)
        try:
            graph = import_frozen(model_path, fs=enc.fs)
            sess = Session(graph, runtime=enc)
            sess.initialize()
            q = FifoQueue(512)
            enc.spawn(_reader_loop, RecordSource(enc.fs, data_path, epochs=None if images else 1), q,
                      name="reader")
            try:
                for _ in range(images):
                    _, img = q.dequeue()
                    out.append(sess.run("logits", {"input": img[None]})[0])
            finally:
                q.close()
        finally:
            idle.close()

    enc.spawn(main, name="classifier")
    enc.run()


@functools.lru_cache(maxsize=16)
def classify_working_set(seed: int = 0, pool: int = 2) -> int:
    """Bytes of distinct enclave pages one classification touches."""
    with tempfile.TemporaryDirectory() as wd:
        model = _prepare_file(wd, MODEL_FILE, frozen_model(seed), False)
        data = _prepare_file(wd, TEST_FILE, dataset_bytes(16, seed + 1), False)
        enc = _enclave(wd, Mode.HARDWARE_SIM, False, 1 << 40, DEFAULT_CLASSIFY_HEAP, 4, None)
        with enc:
            _classify_in(enc, model, data, 1, pool, [])
            return len(enc.paging.resident) * PAGE_SIZE


def classify_epc(seed: int = 0, pool: int = 2) -> int:
    ws = classify_working_set(seed, pool)
    return max(PAGE_SIZE, int(ws / CLASSIFY_WS_OVER_EPC) // PAGE_SIZE * PAGE_SIZE)


def bench_classify(mode: Mode | str = Mode.HARDWARE_SIM, images: int = 20, fs_shield: bool = True,
                   seed: int = 0, epc: int | None = None, heap: int = DEFAULT_CLASSIFY_HEAP,
                   tcs: int = 4, pool: int = 2, costs: CostModel | None = None,
                   workdir: str | None = None) -> tuple[BenchReport, np.ndarray]:
    """Classify ``images`` test images one at a time; returns (report, logits)."""
    mode = Mode(mode)
    epc = classify_epc(seed, pool) if epc is None else epc
    logits: list[np.ndarray] = []
    with tempfile.TemporaryDirectory(dir=workdir) as wd:
        shielded = fs_shield and mode is not Mode.NATIVE
        model = _prepare_file(wd, MODEL_FILE, frozen_model(seed), shielded)
        data = _prepare_file(wd, TEST_FILE, dataset_bytes(max(images, 1), seed + 1), shielded)
        with _enclave(wd, mode, fs_shield, epc, heap, tcs, costs) as enc:
            _classify_in(enc, model, data, images, pool, logits)
            rep = _report(enc, "classify", fs_shield, images, pool)
    arr = np.stack(logits) if logits else np.zeros((0, 10), np.float32)
    rep.extra["logits_sha256"] = hashlib.sha256(arr.tobytes()).hexdigest()
    rep.extra["top1"] = " ".join(str(int(i)) for i in arr.argmax(axis=1)) if len(arr) else ""
    return rep, arr


def top_k(logits: np.ndarray, k: int = 4) -> list[list[tuple[int, float]]]:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    order = np.argsort(-p, axis=1, kind="stable")[:, :k]
    return [[(int(j), float(p[i, j])) for j in row] for i, row in enumerate(order)]


# -- train ------------------------------------------------------------------------

@dataclass
class TrainResult:
    report: BenchReport
    losses: list[float]
    accuracy: float
    values: dict[str, np.ndarray]


def _queue_runner(sess: Session) -> None:
    q = sess.queue("queue")
    try:
        while True:
            sess.run("enqueue")
    except (QueueClosed, EndOfData):
        pass
    finally:
        q.close()


def bench_train(mode: Mode | str = Mode.HARDWARE_SIM, steps: int = 5, threads: int = 1,
                heap: int = DEFAULT_TRAIN_HEAP, fs_shield: bool = True, batch: int = 128,
                lr: float = 0.1, seed: int = 0, epc: int = 90 * MiB, tcs: int = 4,
                samples: int = 2000, costs: CostModel | None = None,
                workdir: str | None = None) -> TrainResult:
    mode = Mode(mode)
    if threads < 1 or batch < threads:
        raise ValueError("need 1 <= threads <= batch")
    losses: list[float] = []
    correct: list[float] = []
    latencies: list[int] = []
    holder: dict[str, Any] = {}
    with tempfile.TemporaryDirectory(dir=workdir) as wd:
        shielded = fs_shield and mode is not Mode.NATIVE
        data = _prepare_file(wd, TRAIN_FILE, dataset_bytes(samples, seed), shielded)
        with _enclave(wd, mode, fs_shield, epc, heap, tcs, costs) as enc:
            graph = build_cifar_model(lr=lr, batch=batch, seed=seed)
            sess = Session(graph, runtime=enc)

            def shard(i: int, images: np.ndarray, labels: np.ndarray):
                loss, grads, (logits,) = sess.gradients(
                    "loss", {"input": images, "labels": labels}, arena_key=("worker", i), extra=["logits"])
                hits = int((logits.argmax(axis=1) == labels.argmax(axis=1)).sum())
                return float(loss), grads, hits

            def main() -> None:
                pool = WorkerPool(enc.scheduler, threads, shard)
                sess.initialize()
                sess.bind_reader("reader", RecordSource(enc.fs, data, epochs=None))
                enc.spawn(_queue_runner, sess, name="queue-runner")
                try:
                    for _ in range(steps):
                        t0 = enc.clock.now
                        images, labels = sess.run(["dequeue:0", "dequeue:1"])
                        y = one_hot(labels.astype(np.int64))
                        parts = np.array_split(np.arange(batch), threads)
                        results = pool.map([(images[p], y[p]) for p in parts])
                        total = {}
                        for p, (_, grads, _) in zip(parts, results):
                            w = np.float32(len(p) / batch)
                            for k, g in grads.items():
                                total[k] = total[k] + w * g if k in total else w * g
                        sess.apply_gradients(total, lr)
                        losses.append(sum(len(p) * r[0] for p, r in zip(parts, results)) / batch)
                        correct.append(sum(r[2] for r in results) / batch)
                        latencies.append(enc.clock.now - t0)
                finally:
                    sess.queue("queue").close()
                    pool.close()

            enc.spawn(main, name="trainer")
            enc.run()
            rep = _report(enc, "train", fs_shield, steps * batch, threads)
            holder["values"] = sess.checkpoint()
    tail = correct[-10:]
    acc = float(np.mean(tail)) if tail else 0.0
    rep.latencies = latencies
    rep.extra["final_loss"] = f"{losses[-1]:.6f}" if losses else ""
    rep.extra["train_accuracy"] = f"{acc:.4f}"
    rep.extra["mean_step_latency"] = str(int(np.mean(latencies))) if latencies else "0"
    return TrainResult(rep, losses, acc, holder["values"])


def train_plain(steps: int, batch: int = 32, lr: float = 0.05, seed: int = 0,
                samples: int = 2000, augment: bool = True) -> tuple[Session, list[float]]:
    """Cost-free training loop over the bundled dataset (no enclave)."""
    from .tensor import augment as augment_image
    from .tensor import decode_records

    labels, images = decode_records(dataset_bytes(samples, seed))
    sess = Session(build_cifar_model(lr=lr, seed=seed))
    sess.initialize()
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, samples, size=batch)
        if augment:
            x = np.stack([augment_image(images[i], rng) for i in idx])
        else:
            x = central_crop(images[idx])
        losses.append(float(sess.run("train_op", {"input": x, "labels": one_hot(labels[idx])})))
    return sess, losses


def evaluate(sess: Session, samples: int = 2000, seed: int = 0, chunk: int = 200) -> float:
    from .tensor import decode_records

    labels, images = decode_records(dataset_bytes(samples, seed))
    hits = 0
    for i in range(0, samples, chunk):
        logits = sess.run("logits", {"input": central_crop(images[i:i + chunk])})
        hits += int((logits.argmax(axis=1) == labels[i:i + chunk]).sum())
    return hits / samples


# -- micro benchmarks -------------------------------------------------------------

def epc_sweep(lo: int = 2 * MiB, hi: int = 64 * MiB, epc: int = 16 * MiB, passes: int = 2,
              costs: CostModel | None = None) -> list[dict[str, float]]:
    """Mean cost per page access for doubling working sets (warm pass excluded)."""
    rows = []
    ws = lo
    while ws <= hi:
        cfg = EnclaveConfig(heap_limit=max(ws, PAGE_SIZE), epc_limit=epc, mode=Mode.HARDWARE_SIM)
        with create_enclave(CODE_IMAGE, cfg, costs=costs) as enc:
            base = enc.alloc(ws, align=PAGE_SIZE)
            enc.mem_access(base, ws, "write")
            enc.paging.reset_counters()
            start = enc.charges.paging
            for p in range(passes):
                enc.mem_access(base, ws, "read" if p % 2 == 0 else "write")
            cost = enc.charges.paging - start
            acc = enc.paging.accesses
            rows.append({"working_set": ws, "ws_over_epc": ws / epc, "accesses": acc,
                         "hits": enc.paging.hits, "misses": enc.paging.misses,
                         "mean_cost": cost / acc if acc else 0.0})
        ws *= 2
    return rows


def sweep_csv(rows: list[dict[str, float]]) -> str:
    lines = ["working_set,ws_over_epc,accesses,hits,misses,mean_cost"]
    for r in rows:
        lines.append(f"{r['working_set']},{r['ws_over_epc']:.4f},{r['accesses']},{r['hits']},"
                     f"{r['misses']},{r['mean_cost']:.4f}")
    return "\n".join(lines) + "\n"


def syscall_profile(workload: str, seed: int = 0, **kw: Any) -> SyscallProfile:
    if workload == "classify":
        rep, _ = bench_classify(Mode.HARDWARE_SIM, seed=seed, **kw)
    elif workload == "train":
        rep = bench_train(Mode.HARDWARE_SIM, seed=seed, **kw).report
    else:
        raise ValueError(f"unknown workload {workload!r}")
    return rep.profile
