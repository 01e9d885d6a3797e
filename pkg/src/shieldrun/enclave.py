"""Simulated enclave: measured code + config, bounded EPC, virtual-time costs."""

from __future__ import annotations

import enum
import hashlib
import os
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

from .errors import AlreadyFinalized, ConfigInvalid, ModeUnknown, OutOfBounds, ParseError, ProvisioningFailed
from .fsshield import FileShield, PathPolicy
from .scheduler import Scheduler, VirtualClock
from .syscalls import HostIO, HostOS, SyscallBridge, SyscallCosts, SyscallProfile

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB
PAGE_SIZE = 4096


class Mode(str, enum.Enum):
    NATIVE = "native"
    SIMULATION = "simulation"
    HARDWARE_SIM = "hardware-sim"


@dataclass(frozen=True)
class EnclaveConfig:
    heap_limit: int = 256 * MiB
    stack_limit: int = 8 * MiB
    epc_limit: int = 90 * MiB
    tcs_count: int = 4
    mode: Mode = Mode.HARDWARE_SIM
    shield_policies: tuple[PathPolicy, ...] = ()
    fs_keys: bytes | None = field(default=None, repr=False)
    tls_identity: Any = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.heap_limit <= 0 or self.epc_limit <= 0 or self.stack_limit <= 0:
            raise ConfigInvalid("heap, stack and EPC limits must be positive")
        if self.tcs_count < 1:
            raise ConfigInvalid("tcs_count must be >= 1")
        if self.fs_keys is not None and len(self.fs_keys) != 32:
            raise ConfigInvalid("fs key must be 32 bytes")
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "shield_policies", tuple(self.shield_policies))

    def canonical(self) -> bytes:
        """Sorted ``key=value`` lines; secret fields are left out entirely."""
        policies = ",".join(f"{p.prefix}:{p.mode.value}" for p in self.shield_policies)
        lines = {
            "epc_limit": str(self.epc_limit),
            "heap_limit": str(self.heap_limit),
            "mode": self.mode.value,
            "shield_policies": policies,
            "stack_limit": str(self.stack_limit),
            "tcs_count": str(self.tcs_count),
        }
        return "".join(f"{k}={lines[k]}\n" for k in sorted(lines)).encode()


@dataclass(frozen=True)
class Measurement:
    digest: bytes

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex


def measure(code_image: bytes, config: EnclaveConfig) -> Measurement:
    h = hashlib.sha256()
    h.update(b"shieldrun-measure-v1\0")
    h.update(struct.pack("<Q", len(code_image)))
    h.update(code_image)
    h.update(config.canonical())
    return Measurement(h.digest())


_SIZE_RE = re.compile(r"^\s*(\d+)\s*([KMG]?)\s*$", re.IGNORECASE)
_SUFFIX = {"": 1, "K": KiB, "M": MiB, "G": GiB}


def parse_size(text: str) -> int:
    m = _SIZE_RE.match(text)
    if not m:
        raise ParseError(f"malformed size {text!r}")
    return int(m.group(1)) * _SUFFIX[m.group(2).upper()]


def parse_mode(text: str) -> Mode:
    try:
        return Mode(text.strip().lower())
    except ValueError:
        raise ModeUnknown(f"unknown mode {text!r}") from None


def read_env_config(env: Mapping[str, str] | None = None) -> EnclaveConfig:
    """Build a config from TS_HEAP / TS_STACK / TS_EPC / TS_TCS / TS_MODE."""
    env = os.environ if env is None else env
    kw: dict[str, Any] = {}
    for var, name in (("TS_HEAP", "heap_limit"), ("TS_STACK", "stack_limit"), ("TS_EPC", "epc_limit")):
        if var in env:
            kw[name] = parse_size(env[var])
    if "TS_TCS" in env:
        try:
            kw["tcs_count"] = int(env["TS_TCS"])
        except ValueError:
            raise ParseError(f"malformed TS_TCS {env['TS_TCS']!r}") from None
    if "TS_MODE" in env:
        kw["mode"] = parse_mode(env["TS_MODE"])
    return EnclaveConfig(**kw)


@dataclass
class CostModel:
    """Virtual-time constants.  All are calibration knobs, not hardware truth."""

    cost_hit: int = 1
    cost_miss: int = 1000
    cost_per_transition: int = 5000
    compute_per_kflop: float = 32.0
    crypto_per_kib: int = 40
    syscall: SyscallCosts = field(default_factory=SyscallCosts)


class PagingModel:
    """LRU set of EPC-resident pages with hit/miss accounting."""

    def __init__(self, epc_limit: int, page_size: int = PAGE_SIZE, cost_hit: int = 1,
                 cost_miss: int = 1000) -> None:
        if epc_limit <= 0 or page_size <= 0:
            raise ConfigInvalid("epc_limit and page_size must be positive")
        self.page_size = page_size
        self.epc_limit = epc_limit
        self.capacity = epc_limit // page_size
        self.cost_hit = cost_hit
        self.cost_miss = cost_miss
        self.resident: OrderedDict[int, None] = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    @property
    def accesses(self) -> int:
        return self.hits + self.misses

    def touch_range(self, first: int, last: int) -> tuple[int, int]:
        """Touch pages ``first..last`` inclusive; returns (hits, misses)."""
        res = self.resident
        hits = misses = 0
        for page in range(first, last + 1):
            if page in res:
                res.move_to_end(page)
                hits += 1
                continue
            misses += 1
            if self.capacity == 0:
                continue
            if len(res) >= self.capacity:
                res.popitem(last=False)
                self.evictions += 1
            res[page] = None
        self.hits += hits
        self.misses += misses
        return hits, misses

    def reset_counters(self) -> None:
        self.hits = self.misses = self.evictions = 0


@dataclass
class TransitionCounter:
    cost_per_transition: int = 5000
    sync_exits: int = 0
    sync_entries: int = 0

    def exit(self) -> None:
        self.sync_exits += 1

    def enter(self) -> None:
        self.sync_entries += 1

    @property
    def total(self) -> int:
        return self.sync_exits + self.sync_entries


@dataclass
class Charges:
    """Virtual time split by what caused it."""

    compute: int = 0
    paging: int = 0
    transitions: int = 0
    crypto: int = 0

    def as_dict(self) -> dict[str, int]:
        return {"compute": self.compute, "paging": self.paging,
                "transitions": self.transitions, "crypto": self.crypto}


class Enclave:
    """A finalized enclave.  Use :func:`create_enclave` to build one."""

    def __init__(self, code_image: bytes, config: EnclaveConfig, costs: CostModel | None = None,
                 host: HostOS | None = None, platform: Any = None, workers: int = 2,
                 synchronous_syscalls: bool = False) -> None:
        if not code_image:
            raise ConfigInvalid("code image must not be empty")
        self.code_image = bytes(code_image)
        self.config = config
        self.costs = costs or CostModel()
        self.measurement = measure(self.code_image, config)
        self.platform = platform
        self.clock = VirtualClock()
        self.charges = Charges()
        self.paging = PagingModel(config.epc_limit, PAGE_SIZE, self.costs.cost_hit, self.costs.cost_miss)
        self.transitions = TransitionCounter(self.costs.cost_per_transition)
        self.scheduler = Scheduler(config.tcs_count, self.clock, self.costs.cost_per_transition,
                                   on_exit_outside=self.transition_pair)
        self.bridge = SyscallBridge(host, clock=self.clock, scheduler=self.scheduler, workers=workers,
                                    costs=self.costs.syscall, synchronous=synchronous_syscalls,
                                    on_sync_transition=self.transition_pair, on_copy_in=self._copy_in)
        self.io = HostIO(self.bridge)
        policies = () if self.mode is Mode.NATIVE else config.shield_policies
        self.fs = FileShield(self.io, policies, key=config.fs_keys, runtime=self)
        self._brk = 0
        self._iobuf: int | None = None
        self.provisioned = config.fs_keys is not None

    @property
    def mode(self) -> Mode:
        return self.config.mode

    @property
    def tcs_count(self) -> int:
        return self.config.tcs_count

    @property
    def heap_used(self) -> int:
        return self._brk

    def load_code(self, image: bytes) -> None:
        raise AlreadyFinalized("enclave is finalized; no code can be added")

    # -- memory ------------------------------------------------------------

    def alloc(self, nbytes: int, align: int = 64) -> int:
        addr = -(-self._brk // align) * align
        if nbytes < 0 or addr + nbytes > self.config.heap_limit:
            raise OutOfBounds(f"heap exhausted: {addr + nbytes} > {self.config.heap_limit}")
        self._brk = addr + nbytes
        return addr

    def mem_access(self, address: int, length: int, kind: str = "read") -> int:
        if kind not in ("read", "write"):
            raise ValueError("kind must be 'read' or 'write'")
        if address < 0 or length < 0 or address >= self.config.heap_limit \
                or address + length > self.config.heap_limit:
            raise OutOfBounds(f"access [{address}, {address + length}) outside heap")
        # only hardware-sim models an EPC; other modes keep paging counters at zero
        if length == 0 or self.mode is not Mode.HARDWARE_SIM:
            return 0
        ps = self.paging.page_size
        hits, misses = self.paging.touch_range(address // ps, (address + length - 1) // ps)
        cost = hits * self.costs.cost_hit + misses * self.costs.cost_miss
        self.charges.paging += cost
        self.clock.advance(cost)
        return cost

    def _copy_in(self, nbytes: int) -> None:
        if self._iobuf is None:
            self._iobuf = self.alloc(self.bridge.max_capacity)
        self.mem_access(self._iobuf, min(nbytes, self.bridge.max_capacity), "write")

    # -- charges -----------------------------------------------------------

    def charge_compute(self, flops: float) -> int:
        cost = int(round(flops / 1000.0 * self.costs.compute_per_kflop))
        self.charges.compute += cost
        self.clock.advance(cost)
        return cost

    def charge_crypto(self, nbytes: int) -> int:
        if self.mode is Mode.NATIVE:
            return 0
        cost = self.costs.crypto_per_kib * -(-nbytes // 1024)
        self.charges.crypto += cost
        self.clock.advance(cost)
        return cost

    def transition_pair(self) -> None:
        """One synchronous exit and re-entry."""
        self.transitions.exit()
        self.transitions.enter()
        if self.mode is Mode.HARDWARE_SIM:
            cost = 2 * self.costs.cost_per_transition
            self.charges.transitions += cost
            self.clock.advance(cost)

    # -- threads -----------------------------------------------------------

    def spawn(self, entry: Callable[..., Any], *args: Any, name: str | None = None) -> int:
        return self.scheduler.spawn(entry, *args, name=name)

    def run(self) -> None:
        self.scheduler.run()

    def profile(self) -> SyscallProfile:
        return self.bridge.profile(self.scheduler.stats)

    # -- attestation -------------------------------------------------------

    def quote(self, nonce: bytes):
        if self.platform is None:
            raise ProvisioningFailed("enclave was created without a platform quoting key")
        return self.platform.quote(self.measurement, nonce)

    def provision(self, fs_key: bytes, tls_identity: Any = None, policies: tuple[PathPolicy, ...] | None = None) -> None:
        """Install secrets released by the CAS.  Allowed exactly once."""
        if self.provisioned:
            raise ProvisioningFailed("enclave already provisioned")
        self.config = replace(self.config, fs_keys=bytes(fs_key), tls_identity=tls_identity)
        self.fs.set_key(self.config.fs_keys)
        if policies is not None and self.mode is not Mode.NATIVE:
            self.fs.policies = list(policies)
        self.provisioned = True

    def close(self) -> None:
        try:
            self.fs.close_all()
        finally:
            self.bridge.close()

    def __enter__(self) -> Enclave:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def create_enclave(code_image: bytes, config: EnclaveConfig, **kwargs: Any) -> Enclave:
    return Enclave(code_image, config, **kwargs)

